//! Local affine form of a ReLU network.
//!
//! On the region where a fixed set of hidden units is active the network is
//! exactly `f(x) = V x + a`. `V` and `a` are obtained by masking the weight
//! matrices with the activation pattern and multiplying them inside out.
//! Pre-activations equal to zero count as inactive.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, fnv1a64};
use crate::nn::MlpParams;

/// On/off pattern of every hidden unit, layer by layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationSignature {
    layers: Vec<Vec<bool>>,
}

impl ActivationSignature {
    pub fn from_layers(layers: Vec<Vec<bool>>) -> Self {
        ActivationSignature { layers }
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.layers
    }

    pub fn total_bits(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn n_active(&self) -> usize {
        self.layers.iter().flatten().filter(|&&b| b).count()
    }

    /// FNV-1a (64 bit) over the ASCII bit string: one `'0'`/`'1'` byte per
    /// unit, hidden layers in order, no separators.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.layers.iter().flatten().map(|&b| if b { b'1' } else { b'0' }))
    }
}

impl fmt::Display for ActivationSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (l, bits) in self.layers.iter().enumerate() {
            if l > 0 {
                f.write_str("|")?;
            }
            for &b in bits {
                f.write_str(if b { "1" } else { "0" })?;
            }
        }
        Ok(())
    }
}

pub fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

/// `f(z) = V z + a` on the region of `anchor_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePiece {
    pub v: Array2<f64>,
    pub a: Array1<f64>,
    pub signature: ActivationSignature,
    pub anchor_x: Array1<f64>,
    /// Some pre-activation was exactly zero at `anchor_x`.
    pub boundary_contact: bool,
}

impl AffinePiece {
    pub fn eval(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.v.dot(&z) + &self.a
    }
}

pub fn signature(params: &MlpParams, x: ArrayView1<'_, f64>) -> ActivationSignature {
    signature_and_contact(params, x).0
}

fn signature_and_contact(params: &MlpParams, x: ArrayView1<'_, f64>) -> (ActivationSignature, bool) {
    let pre = params.pre_activations(x);
    let contact = pre.iter().flatten().any(|&z| z == 0.0);
    let layers = pre.iter().map(|z| z.iter().map(|&v| v > 0.0).collect()).collect();
    (ActivationSignature { layers }, contact)
}

/// Affine maps of every layer's pre-activation as a function of the input,
/// under a fixed activation pattern. Entry `l` is `(V_l, a_l)` for layer `l`
/// (hidden layers first, output layer last).
fn truncated_maps(params: &MlpParams, sig: &ActivationSignature) -> Vec<(Array2<f64>, Array1<f64>)> {
    let layers = params.layers();
    let mut out = Vec::with_capacity(layers.len());
    let mut m = layers[0].weights.clone();
    let mut c = layers[0].bias.clone();
    out.push((m.clone(), c.clone()));
    for (l, layer) in layers.iter().enumerate().skip(1) {
        for (i, &on) in sig.layers[l - 1].iter().enumerate() {
            if !on {
                m.row_mut(i).fill(0.0);
                c[i] = 0.0;
            }
        }
        m = layer.weights.dot(&m);
        c = layer.weights.dot(&c) + &layer.bias;
        out.push((m.clone(), c.clone()));
    }
    out
}

/// `(V, a)` for a given activation pattern. Depends only on `sig`, so two
/// inputs with equal signatures get bit-identical pieces.
pub fn piece_for_signature(params: &MlpParams, sig: &ActivationSignature) -> Result<(Array2<f64>, Array1<f64>)> {
    if sig.layers.len() != params.n_hidden_layers()
        || sig.layers.iter().zip(params.hidden_sizes()).any(|(b, n)| b.len() != n)
    {
        return Err(Error::invalid("signature does not match the network's hidden sizes"));
    }
    Ok(truncated_maps(params, sig).pop().expect("at least one layer"))
}

pub fn linearize(params: &MlpParams, x: ArrayView1<'_, f64>) -> Result<AffinePiece> {
    params.check_input(x)?;
    let (sig, boundary_contact) = signature_and_contact(params, x);
    let (v, a) = piece_for_signature(params, &sig)?;
    Ok(AffinePiece {
        v,
        a,
        signature: sig,
        anchor_x: x.to_owned(),
        boundary_contact,
    })
}

/// `{z : normal . z + offset >= 0}` contributed by one hidden unit.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpace {
    pub layer: usize,
    pub unit: usize,
    pub normal: Array1<f64>,
    pub offset: f64,
    /// The normal is identically zero, so the constraint does not depend on
    /// the input.
    pub degenerate: bool,
}

impl HalfSpace {
    pub fn slack(&self, z: ArrayView1<'_, f64>) -> f64 {
        self.normal.dot(&z) + self.offset
    }
}

/// Implicit description of the activation region around an anchor point.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeDescription {
    pub halfspaces: Vec<HalfSpace>,
    pub signature: ActivationSignature,
    pub boundary_contact: bool,
}

impl PolytopeDescription {
    pub fn contains(&self, z: ArrayView1<'_, f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.slack(z) >= -tol)
    }

    pub fn contains_strictly(&self, z: ArrayView1<'_, f64>) -> bool {
        self.halfspaces.iter().all(|h| h.slack(z) > 0.0)
    }

    /// Whether the ray `z + t * sign * e_dim`, `t >= 0`, eventually stays on
    /// the feasible side of every non-degenerate half-space, i.e. the region
    /// is unbounded in that direction from the ray's point of view.
    pub fn unbounded_along(&self, dim: usize, sign: f64) -> bool {
        self.halfspaces
            .iter()
            .filter(|h| !h.degenerate)
            .all(|h| sign * h.normal[dim] >= 0.0)
    }
}

/// One half-space per hidden unit: the unit's pre-activation, as an affine
/// function of the input under the anchor's pattern, keeps the sign it has at
/// the anchor. Inactive units (including exact zeros) contribute the
/// negated inequality.
pub fn polytope_of(params: &MlpParams, x: ArrayView1<'_, f64>) -> Result<PolytopeDescription> {
    params.check_input(x)?;
    let (sig, boundary_contact) = signature_and_contact(params, x);
    let maps = truncated_maps(params, &sig);
    let mut halfspaces = Vec::with_capacity(sig.total_bits());
    for (l, bits) in sig.layers.iter().enumerate() {
        let (m, c) = &maps[l];
        for (i, &on) in bits.iter().enumerate() {
            let s = if on { 1.0 } else { -1.0 };
            let normal = m.row(i).mapv(|w| s * w);
            let degenerate = normal.iter().all(|&w| w == 0.0);
            halfspaces.push(HalfSpace {
                layer: l,
                unit: i,
                normal,
                offset: s * c[i],
                degenerate,
            });
        }
    }
    Ok(PolytopeDescription {
        halfspaces,
        signature: sig,
        boundary_contact,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroEntryAudit {
    pub has_zero: bool,
    /// `|v_cd| <= tol`.
    pub mask: Array2<bool>,
    pub exact_zero_count: usize,
    /// Entries with `|v_cd| <= 1e-12`.
    pub near_zero_count: usize,
}

pub const NEAR_ZERO_TOL: f64 = 1e-12;

/// Flags entries of `V` with magnitude at most `tol` (use `0.0` for exact
/// structural zeros).
pub fn zero_entry_audit(piece: &AffinePiece, tol: f64) -> ZeroEntryAudit {
    zero_entry_audit_matrix(&piece.v, tol)
}

pub fn zero_entry_audit_matrix(v: &Array2<f64>, tol: f64) -> ZeroEntryAudit {
    let mask = v.mapv(|e| e.abs() <= tol);
    ZeroEntryAudit {
        has_zero: mask.iter().any(|&b| b),
        mask,
        exact_zero_count: v.iter().filter(|&&e| e == 0.0).count(),
        near_zero_count: v.iter().filter(|&&e| e.abs() <= NEAR_ZERO_TOL).count(),
    }
}

/// True iff two classes have `|v_cd - v_c'd| <= tol` in column `d`.
pub fn duplicate_column_audit(piece: &AffinePiece, d: usize, tol: f64) -> Result<bool> {
    duplicate_column_audit_matrix(&piece.v, d, tol)
}

pub fn duplicate_column_audit_matrix(v: &Array2<f64>, d: usize, tol: f64) -> Result<bool> {
    if d >= v.ncols() {
        return Err(Error::invalid(format!("dimension {d} out of range")));
    }
    let col = v.column(d);
    Ok((0..col.len()).any(|i| ((i + 1)..col.len()).any(|j| (col[i] - col[j]).abs() <= tol)))
}

/// Central-difference Jacobian of the logits, `C x D`.
pub fn fd_jacobian(params: &MlpParams, x: ArrayView1<'_, f64>, h: f64) -> Result<Array2<f64>> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    params.check_input(x)?;
    let (c, d) = (params.output_dim(), params.input_dim());
    let mut jac = Array2::zeros((c, d));
    for j in 0..d {
        let mut xp = x.to_owned();
        let mut xm = x.to_owned();
        xp[j] += h;
        xm[j] -= h;
        let diff = (params.forward_unchecked(xp.view()) - params.forward_unchecked(xm.view())) / (2.0 * h);
        jac.column_mut(j).assign(&diff);
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    /// `sign(v_cd)` as -1, 0 or 1.
    pub signs: Array2<i8>,
    /// No zero entries: every logit is strictly monotone in every input on
    /// this region.
    pub strictly_monotonic: bool,
}

pub fn monotonicity_audit(piece: &AffinePiece) -> MonotonicityReport {
    let signs = piece.v.mapv(|e| {
        if e > 0.0 {
            1
        } else if e < 0.0 {
            -1
        } else {
            0
        }
    });
    let strictly_monotonic = signs.iter().all(|&s| s != 0);
    MonotonicityReport {
        signs,
        strictly_monotonic,
    }
}

/// Region export: one row per point with its signature hash, zero-entry flag
/// and the local `(V, a)`.
pub fn region_csv(params: &MlpParams, points: &[Array1<f64>]) -> Result<String> {
    let (c, d) = (params.output_dim(), params.input_dim());
    let mut out = String::new();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("signature_hash".into());
    header.push("has_zero_entry".into());
    for ci in 0..c {
        for j in 0..d {
            header.push(format!("v{ci}{j}"));
        }
    }
    header.extend((0..c).map(|ci| format!("a{ci}")));
    out.push_str(&header.join(","));
    out.push('\n');
    for x in points {
        let piece = linearize(params, x.view())?;
        let mut row: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
        row.push(hash_hex(piece.signature.hash()));
        row.push((zero_entry_audit(&piece, 0.0).has_zero as u8).to_string());
        row.extend(piece.v.iter().map(|&v| fmt_f64(v)));
        row.extend(piece.a.iter().map(|&v| fmt_f64(v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}
