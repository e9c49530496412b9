//! Training objectives with analytic gradients: Sub-Center ArcFace, the
//! flip anti-symmetry hinge and their sum on the Euclidean side; the
//! probabilistic supervised contrastive loss, solidity radius prior and
//! mirror-negative hinge on the Lorentz side.
//!
//! Lorentz gradients are taken with respect to the tangent vectors at the
//! origin, through tangent clipping and the exponential map. Everything is
//! `f64` so the analytic gradients can be checked by central differences.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coreset::Similarity;
use crate::error::{Error, Result};
use crate::geometry::{chordal_distance, exp_map_origin, TANGENT_CLIP};

pub const ARCFACE_MARGIN: f64 = 0.5;
pub const ARCFACE_SCALE: f64 = 51.5;
pub const ARCFACE_SUBCENTRES: usize = 3;
/// A loss over a batch type, as taken by the finite-difference checks.
pub type LossFn<B> = dyn Fn(&B) -> Result<LossEval>;

pub const COS_CLAMP: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Minimum distance from any hinge, clip or branch boundary for a batch to
/// be used in a finite-difference check.
pub const KINK_GAP: f64 = 1e-3;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged matrix rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn add_scaled(&mut self, other: &Matrix, c: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += c * b;
    }
}

/// A loss value and its gradient with respect to each named input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub value: f64,
    pub grads: BTreeMap<String, Matrix>,
}

impl LossEval {
    pub fn grad(&self, name: &str) -> &Matrix {
        &self.grads[name]
    }

    fn combine(mut self, other: &LossEval, c: f64) -> LossEval {
        self.value += c * other.value;
        for (k, g) in &other.grads {
            match self.grads.get_mut(k) {
                Some(mine) => mine.add_scaled(g, c),
                None => {
                    let mut g = g.clone();
                    g.scale(c);
                    self.grads.insert(k.clone(), g);
                }
            }
        }
        self
    }
}

/// Inputs a loss can be differentiated against, addressable by name.
pub trait LossInputs: Clone {
    fn input_mut(&mut self, name: &str) -> &mut Matrix;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EuclideanBatch {
    /// `B x D` unit rows.
    pub z: Matrix,
    /// Embeddings of the flipped images, `B x D` unit rows.
    pub z_flip: Matrix,
    pub labels: Vec<usize>,
    /// `C*k x D` sub-centre rows; class `c` owns rows `c*k .. (c+1)*k`.
    pub w: Matrix,
    pub k: usize,
    pub margin: f64,
    pub scale: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl EuclideanBatch {
    pub fn n_classes(&self) -> usize {
        self.w.rows / self.k
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.w.rows % self.k != 0 {
            return Err(Error::invalid("sub-centre rows must be a multiple of k >= 1"));
        }
        if self.z.rows != self.labels.len() || self.z_flip.rows != self.z.rows {
            return Err(Error::invalid("batch rows disagree"));
        }
        if self.z.cols != self.w.cols || self.z_flip.cols != self.z.cols {
            return Err(Error::DimensionMismatch {
                left: self.z.cols,
                right: self.w.cols,
            });
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {} classes",
                self.n_classes()
            )));
        }
        Ok(())
    }
}

impl LossInputs for EuclideanBatch {
    fn input_mut(&mut self, name: &str) -> &mut Matrix {
        match name {
            "z" => &mut self.z,
            "z_flip" => &mut self.z_flip,
            "w" => &mut self.w,
            _ => panic!("unknown input {name}"),
        }
    }
}

/// Best sub-centre of class `c` for embedding `z`: (index, raw dot product).
fn best_subcentre(b: &EuclideanBatch, z: &[f64], c: usize) -> (usize, f64) {
    (c * b.k..(c + 1) * b.k)
        .map(|r| (r, dot(z, b.w.row(r))))
        .fold(
            (usize::MAX, f64::NEG_INFINITY),
            |acc, x| if x.1 > acc.1 { x } else { acc },
        )
}

/// Sub-Center ArcFace, mean over the batch; gradients for `z` and `w`.
pub fn arcface_loss(b: &EuclideanBatch) -> Result<LossEval> {
    b.validate()?;
    let (n, c_count) = (b.z.rows, b.n_classes());
    let (cos_m, sin_m) = (b.margin.cos(), b.margin.sin());
    let threshold = (std::f64::consts::PI - b.margin).cos();
    let mut gz = Matrix::zeros(n, b.z.cols);
    let mut gw = Matrix::zeros(b.w.rows, b.w.cols);
    let mut total = 0.0;
    for i in 0..n {
        let z = b.z.row(i);
        let y = b.labels[i];
        let mut logits = Vec::with_capacity(c_count);
        // d logit / d raw dot product, and which sub-centre it came from.
        let mut dlogit = Vec::with_capacity(c_count);
        let mut rows = Vec::with_capacity(c_count);
        for c in 0..c_count {
            let (r, raw) = best_subcentre(b, z, c);
            let lo = -1.0 + COS_CLAMP;
            let hi = 1.0 - COS_CLAMP;
            let cos = raw.clamp(lo, hi);
            let pass = if raw > lo && raw < hi { 1.0 } else { 0.0 };
            let (logit, d) = if c != y {
                (b.scale * cos, b.scale)
            } else if cos > threshold {
                let sin = (1.0 - cos * cos).sqrt();
                (
                    b.scale * (cos * cos_m - sin * sin_m),
                    b.scale * (cos_m + cos * sin_m / sin),
                )
            } else {
                (b.scale * (cos - b.margin * sin_m), b.scale)
            };
            logits.push(logit);
            dlogit.push(d * pass);
            rows.push(r);
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += mx + sum.ln() - logits[y];
        for c in 0..c_count {
            let g = (exps[c] / sum - if c == y { 1.0 } else { 0.0 }) * dlogit[c] / n as f64;
            if g == 0.0 {
                continue;
            }
            let wrow = b.w.row(rows[c]).to_vec();
            axpy(gz.row_mut(i), g, &wrow);
            axpy(gw.row_mut(rows[c]), g, z);
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert("z".into(), gz);
    grads.insert("w".into(), gw);
    Ok(LossEval {
        value: total / n as f64,
        grads,
    })
}

/// Mean hinge `max(0, cos(z_i, z_flip_i) - tau)`.
pub fn antisym_loss(z: &Matrix, z_flip: &Matrix, tau: f64) -> Result<LossEval> {
    if z.rows != z_flip.rows || z.cols != z_flip.cols {
        return Err(Error::invalid("z and z_flip shapes differ"));
    }
    let n = z.rows;
    let mut gz = Matrix::zeros(n, z.cols);
    let mut gf = Matrix::zeros(n, z.cols);
    let mut total = 0.0;
    for i in 0..n {
        let (a, f) = (z.row(i), z_flip.row(i));
        let (na, nf) = (norm(a), norm(f));
        if na == 0.0 || nf == 0.0 {
            return Err(Error::ZeroRow(format!("batch row {i}")));
        }
        let cos = dot(a, f) / (na * nf);
        if cos > tau {
            total += cos - tau;
            let s = 1.0 / n as f64;
            let ga = gz.row_mut(i);
            for d in 0..a.len() {
                ga[d] = s * (f[d] / (na * nf) - cos * a[d] / (na * na));
            }
            let gfr = gf.row_mut(i);
            for d in 0..a.len() {
                gfr[d] = s * (a[d] / (na * nf) - cos * f[d] / (nf * nf));
            }
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert("z".into(), gz);
    grads.insert("z_flip".into(), gf);
    Ok(LossEval {
        value: total / n as f64,
        grads,
    })
}

/// `arcface + lambda * antisym`.
pub fn euclidean_total(b: &EuclideanBatch) -> Result<LossEval> {
    let arc = arcface_loss(b)?;
    let anti = antisym_loss(&b.z, &b.z_flip, b.tau)?;
    Ok(arc.combine(&anti, b.lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzParams {
    pub tau: f64,
    pub lambda_r: f64,
    pub lambda_m: f64,
    pub kappa: f64,
    pub sigma_min2: f64,
    pub sigma_max2: f64,
    pub gamma: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub m_mirror: f64,
}

impl Default for LorentzParams {
    fn default() -> Self {
        LorentzParams::objective(Objective::O1)
    }
}

/// The two Lorentz objectives: without (O0) and with (O1) the mirror term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    O0,
    O1,
}

impl LorentzParams {
    pub fn objective(o: Objective) -> Self {
        LorentzParams {
            tau: 0.1,
            lambda_r: 0.15,
            lambda_m: match o {
                Objective::O0 => 0.0,
                Objective::O1 => 0.1,
            },
            kappa: 2.0,
            sigma_min2: 0.25,
            sigma_max2: 0.9,
            gamma: 1.5,
            r_min: 0.2,
            r_max: 2.0,
            m_mirror: 0.5,
        }
    }

    /// Per-sample variance from mask solidity; non-increasing in `s`.
    pub fn sigma2(&self, s: f64) -> Result<f64> {
        check_solidity(s)?;
        Ok(self.sigma_min2 + (self.sigma_max2 - self.sigma_min2) * (1.0 - s).powf(self.gamma))
    }

    /// Target geodesic radius from mask solidity; increasing in `s`.
    pub fn target_radius(&self, s: f64) -> Result<f64> {
        check_solidity(s)?;
        Ok(self.r_min + (self.r_max - self.r_min) * s)
    }
}

fn check_solidity(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::invalid(format!("solidity {s} outside [0, 1]")))
    }
}

pub fn sigma2(s: f64) -> Result<f64> {
    LorentzParams::default().sigma2(s)
}

pub fn target_radius(s: f64) -> Result<f64> {
    LorentzParams::default().target_radius(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LorentzBatch {
    /// `B x D` tangent vectors at the origin.
    pub tangents: Matrix,
    pub flip_tangents: Matrix,
    pub labels: Vec<usize>,
    pub solidity: Vec<f64>,
    pub params: LorentzParams,
}

impl LorentzBatch {
    fn validate(&self) -> Result<()> {
        let n = self.tangents.rows;
        if self.labels.len() != n || self.solidity.len() != n || self.flip_tangents.rows != n {
            return Err(Error::invalid("batch rows disagree"));
        }
        if self.flip_tangents.cols != self.tangents.cols {
            return Err(Error::DimensionMismatch {
                left: self.tangents.cols,
                right: self.flip_tangents.cols,
            });
        }
        self.solidity.iter().try_for_each(|&s| check_solidity(s))
    }

    fn sigma2s(&self) -> Result<Vec<f64>> {
        self.solidity.iter().map(|&s| self.params.sigma2(s)).collect()
    }
}

impl LossInputs for LorentzBatch {
    fn input_mut(&mut self, name: &str) -> &mut Matrix {
        match name {
            "tangents" => &mut self.tangents,
            "flip_tangents" => &mut self.flip_tangents,
            _ => panic!("unknown input {name}"),
        }
    }
}

/// A tangent lifted onto the hyperboloid, with what the backward pass needs.
struct Lifted {
    t: Vec<f64>,
    t_norm: f64,
    clipped: bool,
    v: Vec<f64>,
    r: f64,
    x: Vec<f64>,
}

fn lift(t: &[f64]) -> Lifted {
    let t_norm = norm(t);
    let clipped = t_norm > TANGENT_CLIP;
    let v: Vec<f64> = if clipped {
        t.iter().map(|x| x * TANGENT_CLIP / t_norm).collect()
    } else {
        t.to_vec()
    };
    let r = norm(&v);
    Lifted {
        t: t.to_vec(),
        t_norm,
        clipped,
        x: exp_map_origin(t).coords().to_vec(),
        v,
        r,
    }
}

/// Pulls a gradient on the ambient point `x` back to the tangent `t`.
fn lift_vjp(l: &Lifted, g: &[f64]) -> Vec<f64> {
    let (g0, gs) = (g[0], &g[1..]);
    let mut gv = vec![0.0; l.v.len()];
    if l.r < 1e-8 {
        axpy(&mut gv, g0, &l.v);
        axpy(&mut gv, 1.0, gs);
    } else {
        let r = l.r;
        let f = r.sinh() / r;
        let fp = (r * r.cosh() - r.sinh()) / (r * r);
        let vg = dot(&l.v, gs);
        axpy(&mut gv, g0 * r.sinh() / r, &l.v);
        axpy(&mut gv, f, gs);
        axpy(&mut gv, fp * vg / r, &l.v);
    }
    if !l.clipped {
        return gv;
    }
    // Jacobian of t -> c t/|t| is (c/|t|)(I - u u^T).
    let c = TANGENT_CLIP / l.t_norm;
    let ug = dot(&l.t, &gv) / l.t_norm;
    gv.iter()
        .zip(&l.t)
        .map(|(gi, ti)| c * (gi - ug * ti / l.t_norm))
        .collect()
}

/// Gradient of `d^2(x, y)` (or of `d`) with respect to `x`, expressed via the
/// Minkowski squared norm of `x - y`. `None` for `d` at coincident points.
fn distance_grad(x: &[f64], y: &[f64], squared: bool) -> (f64, Option<Vec<f64>>) {
    let d = chordal_distance(x, y);
    let mut q = -(x[0] - y[0]).powi(2);
    for k in 1..x.len() {
        q += (x[k] - y[k]).powi(2);
    }
    let s = q.max(0.0).sqrt();
    let root = (1.0 + s * s / 4.0).sqrt();
    let dq = if squared {
        if s < 1e-12 {
            1.0
        } else {
            d / (s * root)
        }
    } else if s < 1e-12 {
        return (d, None);
    } else {
        1.0 / (2.0 * s * root)
    };
    let mut g: Vec<f64> = x.iter().zip(y).map(|(a, b)| 2.0 * dq * (a - b)).collect();
    g[0] = -g[0];
    (if squared { d * d } else { d }, Some(g))
}

fn lorentz_eval(value: f64, gt: Vec<Vec<f64>>, gf: Vec<Vec<f64>>) -> LossEval {
    let mut grads = BTreeMap::new();
    grads.insert("tangents".into(), Matrix::from_rows(&gt).expect("rectangular"));
    grads.insert("flip_tangents".into(), Matrix::from_rows(&gf).expect("rectangular"));
    LossEval { value, grads }
}

/// Probabilistic supervised contrastive loss over valid anchors.
pub fn lorentz_supcon(b: &LorentzBatch) -> Result<LossEval> {
    b.validate()?;
    let n = b.tangents.rows;
    let sig = b.sigma2s()?;
    let lifted: Vec<Lifted> = (0..n).map(|i| lift(b.tangents.row(i))).collect();
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && b.labels[j] == b.labels[i]))
        .collect();
    if anchors.is_empty() || n < 2 {
        return Err(Error::invalid("no anchor has a same-identity partner"));
    }
    let dim1 = b.tangents.cols + 1;
    let mut gx = vec![vec![0.0; dim1]; n];
    let mut total = 0.0;
    let a_count = anchors.len() as f64;
    for &i in &anchors {
        let mut ell = vec![0.0; n];
        let mut dd = vec![None; n];
        for j in (0..n).filter(|&j| j != i) {
            let (d2, g) = distance_grad(&lifted[i].x, &lifted[j].x, true);
            let c = 1.0 / (2.0 * (sig[i] + sig[j]) * b.params.tau);
            ell[j] = -d2 * c;
            dd[j] = g.map(|g| (g, c));
        }
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mx = others.iter().map(|&j| ell[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = others.iter().map(|&j| (ell[j] - mx).exp()).sum();
        let lse = mx + sum.ln();
        let pos: Vec<usize> = others.iter().copied().filter(|&j| b.labels[j] == b.labels[i]).collect();
        let p = pos.len() as f64;
        total -= pos.iter().map(|&j| ell[j] - lse).sum::<f64>() / p;
        for &j in &others {
            let soft = (ell[j] - lse).exp();
            let is_pos = if b.labels[j] == b.labels[i] { 1.0 } else { 0.0 };
            // dL/d ell_ij, then d ell / d d^2 = -c.
            let dl = (soft - is_pos / p) / a_count;
            if let Some((g, c)) = &dd[j] {
                let coef = -dl * c;
                axpy(&mut gx[i], coef, g);
                axpy(&mut gx[j], -coef, g);
            }
        }
    }
    let gt = (0..n).map(|i| lift_vjp(&lifted[i], &gx[i])).collect();
    let gf = vec![vec![0.0; b.tangents.cols]; n];
    Ok(lorentz_eval(total / a_count, gt, gf))
}

/// Solidity-conditioned radius prior, mean over the batch.
pub fn radius_prior(b: &LorentzBatch) -> Result<LossEval> {
    b.validate()?;
    if !(b.params.kappa > 0.0) {
        return Err(Error::invalid("kappa must be positive"));
    }
    let n = b.tangents.rows;
    let sig = b.sigma2s()?;
    let mut total = 0.0;
    let mut gt = Vec::with_capacity(n);
    for i in 0..n {
        let l = lift(b.tangents.row(i));
        let g = b.params.target_radius(b.solidity[i])?;
        let ks = b.params.kappa * sig[i];
        total += (l.r - g).powi(2) / (2.0 * ks) + 0.5 * ks.ln();
        // r = |clip(t)|; the clip makes it constant beyond the clip norm.
        let coef = (l.r - g) / ks / n as f64;
        gt.push(if l.clipped || l.r == 0.0 {
            vec![0.0; l.t.len()]
        } else {
            l.t.iter().map(|x| coef * x / l.r).collect()
        });
    }
    let gf = vec![vec![0.0; b.tangents.cols]; n];
    Ok(lorentz_eval(total / n as f64, gt, gf))
}

/// Mean hinge `max(0, m_mirror - d(mu_i, mu_i_flip))`.
pub fn mirror_negative(b: &LorentzBatch) -> Result<LossEval> {
    b.validate()?;
    let n = b.tangents.rows;
    let mut total = 0.0;
    let (mut gt, mut gf) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (a, f) = (lift(b.tangents.row(i)), lift(b.flip_tangents.row(i)));
        let (d, g) = distance_grad(&a.x, &f.x, false);
        let zero = vec![0.0; a.t.len()];
        if d < b.params.m_mirror {
            total += b.params.m_mirror - d;
            if let Some(g) = g {
                let ga: Vec<f64> = g.iter().map(|x| -x / n as f64).collect();
                let gb: Vec<f64> = g.iter().map(|x| x / n as f64).collect();
                gt.push(lift_vjp(&a, &ga));
                gf.push(lift_vjp(&f, &gb));
                continue;
            }
        }
        gt.push(zero.clone());
        gf.push(zero);
    }
    Ok(lorentz_eval(total / n as f64, gt, gf))
}

/// `supcon + lambda_r * radius + lambda_m * mirror`.
pub fn lorentz_total(b: &LorentzBatch) -> Result<LossEval> {
    let sup = lorentz_supcon(b)?;
    let rad = radius_prior(b)?;
    let mir = mirror_negative(b)?;
    Ok(sup.combine(&rad, b.params.lambda_r).combine(&mir, b.params.lambda_m))
}

/// Central-difference gradient of `f` with respect to input `name`.
pub fn numeric_gradient<B: LossInputs>(
    batch: &B,
    name: &str,
    f: &dyn Fn(&B) -> Result<LossEval>,
    h: f64,
) -> Result<Matrix> {
    let mut probe = batch.clone();
    let shape = probe.input_mut(name).clone();
    let mut out = Matrix::zeros(shape.rows, shape.cols);
    for k in 0..shape.data.len() {
        let orig = shape.data[k];
        probe.input_mut(name).data[k] = orig + h;
        let up = f(&probe)?.value;
        probe.input_mut(name).data[k] = orig - h;
        let down = f(&probe)?.value;
        probe.input_mut(name).data[k] = orig;
        out.data[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `max|a - n| / max(|a|_inf, |n|_inf)`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-12)
}

/// Largest relative error over every input the loss reports a gradient for.
pub fn max_gradient_error<B: LossInputs>(batch: &B, f: &dyn Fn(&B) -> Result<LossEval>, h: f64) -> Result<f64> {
    let eval = f(batch)?;
    let mut worst = 0.0f64;
    for (name, g) in &eval.grads {
        let num = numeric_gradient(batch, name, f, h)?;
        worst = worst.max(relative_error(g, &num));
    }
    Ok(worst)
}

fn gaussian_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_row(rng, d);
    let n = norm(&v);
    v.iter().map(|x| x / n).collect()
}

/// Smallest distance of a Euclidean batch from any non-smooth point of the
/// objectives: the anti-symmetry hinge, sub-centre argmax switches, the
/// margin fallback branch and the cosine clamp.
pub fn euclidean_kink_gap(b: &EuclideanBatch) -> f64 {
    let threshold = (std::f64::consts::PI - b.margin).cos();
    let mut gap = f64::INFINITY;
    for i in 0..b.z.rows {
        let z = b.z.row(i);
        let f = b.z_flip.row(i);
        gap = gap.min((dot(z, f) / (norm(z) * norm(f)) - b.tau).abs());
        for c in 0..b.n_classes() {
            let mut cs: Vec<f64> = (c * b.k..(c + 1) * b.k).map(|r| dot(z, b.w.row(r))).collect();
            cs.sort_by(|x, y| y.total_cmp(x));
            if cs.len() > 1 {
                gap = gap.min(cs[0] - cs[1]);
            }
            gap = gap.min(1.0 - COS_CLAMP - cs[0].abs());
            if c == b.labels[i] {
                gap = gap.min((cs[0] - threshold).abs());
            }
        }
    }
    gap
}

/// Same for a Lorentz batch: tangent clipping and the mirror hinge.
pub fn lorentz_kink_gap(b: &LorentzBatch) -> f64 {
    let mut gap = f64::INFINITY;
    for i in 0..b.tangents.rows {
        let (t, f) = (b.tangents.row(i), b.flip_tangents.row(i));
        gap = gap
            .min((norm(t) - TANGENT_CLIP).abs())
            .min((norm(f) - TANGENT_CLIP).abs());
        let d = chordal_distance(exp_map_origin(t).coords(), exp_map_origin(f).coords());
        gap = gap.min((d - b.params.m_mirror).abs()).min(d);
    }
    gap
}

/// Seeded random Euclidean batch of unit rows, redrawn until it sits at
/// least [`KINK_GAP`] from every kink.
pub fn random_euclidean_batch(seed: u64, b: usize, c: usize, k: usize, d: usize) -> EuclideanBatch {
    for stream in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let z: Vec<Vec<f64>> = (0..b).map(|_| unit_row(&mut rng, d)).collect();
        let z_flip: Vec<Vec<f64>> = z
            .iter()
            .map(|row| {
                let noise = gaussian_row(&mut rng, d);
                let v: Vec<f64> = row.iter().zip(&noise).map(|(a, e)| a + 0.4 * e).collect();
                let n = norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let w: Vec<Vec<f64>> = (0..c * k).map(|_| unit_row(&mut rng, d)).collect();
        let labels = (0..b).map(|_| rng.random_range(0..c)).collect();
        let batch = EuclideanBatch {
            z: Matrix::from_rows(&z).unwrap(),
            z_flip: Matrix::from_rows(&z_flip).unwrap(),
            labels,
            w: Matrix::from_rows(&w).unwrap(),
            k,
            margin: ARCFACE_MARGIN,
            scale: ARCFACE_SCALE,
            tau: 0.3,
            lambda: 1.0,
        };
        if euclidean_kink_gap(&batch) > KINK_GAP {
            return batch;
        }
    }
    unreachable!()
}

/// Seeded random Lorentz batch with `ids` identities (every identity gets at
/// least two samples when `b >= 2 * ids`), kept away from kinks.
pub fn random_lorentz_batch(seed: u64, b: usize, d: usize, ids: usize, params: LorentzParams) -> LorentzBatch {
    for stream in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let tangents: Vec<Vec<f64>> = (0..b)
            .map(|_| gaussian_row(&mut rng, d).iter().map(|x| 0.6 * x).collect())
            .collect();
        let flips: Vec<Vec<f64>> = tangents
            .iter()
            .map(|t| {
                let e = gaussian_row(&mut rng, d);
                t.iter().zip(&e).map(|(a, x)| a + 0.3 * x).collect()
            })
            .collect();
        let mut labels: Vec<usize> = (0..b).map(|i| i % ids.max(1)).collect();
        labels.shuffle(&mut rng);
        let solidity = (0..b).map(|_| rng.random_range(0.05..0.95)).collect();
        let batch = LorentzBatch {
            tangents: Matrix::from_rows(&tangents).unwrap(),
            flip_tangents: Matrix::from_rows(&flips).unwrap(),
            labels,
            solidity,
            params,
        };
        if lorentz_kink_gap(&batch) > KINK_GAP {
            return batch;
        }
    }
    unreachable!()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCheck {
    pub objective: String,
    pub value: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Value and finite-difference gradient error of every objective on seeded
/// random batches.
pub fn loss_check(seed: u64) -> Result<Vec<LossCheck>> {
    let eb = random_euclidean_batch(seed, 4, 3, ARCFACE_SUBCENTRES, 8);
    let lb = random_lorentz_batch(seed, 6, 4, 3, LorentzParams::default());
    let anti = |b: &EuclideanBatch| antisym_loss(&b.z, &b.z_flip, b.tau);
    let euclid: [(&str, &LossFn<EuclideanBatch>); 3] = [
        ("arcface", &arcface_loss),
        ("antisym", &anti),
        ("euclidean_total", &euclidean_total),
    ];
    let lorentz: [(&str, &LossFn<LorentzBatch>); 4] = [
        ("lorentz_supcon", &lorentz_supcon),
        ("radius_prior", &radius_prior),
        ("mirror_negative", &mirror_negative),
        ("lorentz_total", &lorentz_total),
    ];
    let mut out = Vec::new();
    let mut push = |objective: &str, value: f64, err: f64| {
        out.push(LossCheck {
            objective: objective.into(),
            value,
            max_rel_error: err,
            passed: err < FD_TOLERANCE && value.is_finite(),
        })
    };
    for (name, f) in euclid {
        push(name, f(&eb)?.value, max_gradient_error(&eb, f, FD_STEP)?);
    }
    for (name, f) in lorentz {
        push(name, f(&lb)?.value, max_gradient_error(&lb, f, FD_STEP)?);
    }
    Ok(out)
}

/// One training tuple. Mirror and background negatives name the image whose
/// flipped view or background cutout serves as the negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningTuple {
    pub anchor: usize,
    pub positive: usize,
    pub mirror_negative: usize,
    pub background_negative: usize,
    pub hard_negative: usize,
}

/// Identity-uniform batch assembly with three negative tiers: the anchor's
/// own mirror and background cutout, and its most similar image of another
/// identity under `sim`.
pub fn assemble_batch(
    identities: &[String],
    sim: &Similarity,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<MiningTuple>> {
    let n = identities.len();
    if sim.len() != n {
        return Err(Error::DimensionMismatch {
            left: n,
            right: sim.len(),
        });
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, id) in identities.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("hard negatives need at least two identities"));
    }
    let eligible: Vec<&Vec<usize>> = groups.values().filter(|g| g.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no identity has two images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let members = eligible[rng.random_range(0..eligible.len())];
        let a = rng.random_range(0..members.len());
        let mut p = rng.random_range(0..members.len() - 1);
        if p >= a {
            p += 1;
        }
        let anchor = members[a];
        let hard_negative = (0..n)
            .filter(|&j| identities[j] != identities[anchor])
            .max_by(|&x, &y| sim.get(anchor, x).total_cmp(&sim.get(anchor, y)).then(y.cmp(&x)))
            .expect("two identities exist");
        out.push(MiningTuple {
            anchor,
            positive: members[p],
            mirror_negative: anchor,
            background_negative: anchor,
            hard_negative,
        });
    }
    Ok(out)
}
