//! Retrieval scores: cosine similarity and the Lorentz hyperboloid model.
//!
//! The hyperboloid has curvature fixed to 1: points satisfy
//! `<x,x>_L = -1` with `x0 >= 1`, where `<u,v>_L = -u0 v0 + sum_i ui vi`.
//! Points are only built through [`exp_map_origin`], which clips the
//! tangent norm to [`TANGENT_CLIP`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{l2_normalize, EmbeddingMatrix, Space};
use crate::error::{Error, Result};
use crate::par::Execution;

/// Maximum tangent norm accepted by [`exp_map_origin`].
pub const TANGENT_CLIP: f64 = 3.0;

/// Slack below 1 tolerated for `-<u,v>_L` before a pair counts as off-manifold.
pub const ARCCOSH_TOLERANCE: f64 = 1e-7;

const QUERY_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Cosine,
    ExpNegLorentz,
    External,
}

/// Query x gallery scores; larger always means more similar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub queries: Vec<String>,
    pub gallery: Vec<String>,
    pub kind: ScoreKind,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(queries: Vec<String>, gallery: Vec<String>, scores: Vec<f64>, kind: ScoreKind) -> Result<Self> {
        if scores.len() != queries.len() * gallery.len() {
            return Err(Error::invalid(format!(
                "{} scores for a {} x {} matrix",
                scores.len(),
                queries.len(),
                gallery.len()
            )));
        }
        if let Some(pos) = scores.iter().position(|s| s.is_nan()) {
            return Err(Error::NonFinite {
                key: "score matrix".into(),
                image_id: format!("{}->{}", queries[pos / gallery.len()], gallery[pos % gallery.len()]),
            });
        }
        Ok(ScoreMatrix {
            queries,
            gallery,
            kind,
            scores,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery.len()
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.scores[q * self.gallery.len() + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        let g = self.gallery.len();
        &self.scores[q * g..(q + 1) * g]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Applies `f` to every score, keeping ids and kind.
    pub fn map_scores(&self, f: impl Fn(f64) -> f64) -> Result<ScoreMatrix> {
        ScoreMatrix::new(
            self.queries.clone(),
            self.gallery.clone(),
            self.scores.iter().map(|&s| f(s)).collect(),
            self.kind,
        )
    }

    /// `query_id,gallery_id,score` rows with six decimals, self-pairs omitted.
    /// This is also the challenge submission layout.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "query_id,gallery_id,score")?;
        for (qi, q) in self.queries.iter().enumerate() {
            for (gi, g) in self.gallery.iter().enumerate() {
                if q == g {
                    continue;
                }
                writeln!(w, "{q},{g},{:.6}", self.get(qi, gi))?;
            }
        }
        Ok(())
    }
}

/// Row-major `m x n` block of dot products between the rows of `a` (`m x d`)
/// and `b` (`n x d`). Query rows are split into fixed-size chunks, so the
/// output is identical for any worker count.
pub fn dot_block(a: &[f32], m: usize, b: &[f32], n: usize, d: usize, exec: Execution) -> Vec<f32> {
    assert_eq!(a.len(), m * d);
    assert_eq!(b.len(), n * d);
    let mut out = vec![0.0f32; m * n];
    if m == 0 || n == 0 {
        return out;
    }
    exec.for_each_chunk_mut(&mut out, QUERY_CHUNK * n, |ci, c| {
        let row0 = ci * QUERY_CHUNK;
        let rows = c.len() / n;
        let a_chunk = &a[row0 * d..(row0 + rows) * d];
        // SAFETY: the strides describe `a_chunk` (rows x d, row-major), `b`
        // read as its transpose (d x n) and `c` (rows x n, row-major); all
        // three slices have exactly the lengths those shapes require.
        unsafe {
            matrixmultiply::sgemm(
                rows,
                d,
                n,
                1.0,
                a_chunk.as_ptr(),
                d as isize,
                1,
                b.as_ptr(),
                1,
                d as isize,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

/// Cosine scores between l2-normalised query and gallery rows.
pub fn cosine_scores(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    cosine_scores_with(Execution::default(), queries, gallery)
}

pub fn cosine_scores_with(
    exec: Execution,
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
) -> Result<ScoreMatrix> {
    if queries.dim() != gallery.dim() {
        return Err(Error::DimensionMismatch {
            left: queries.dim(),
            right: gallery.dim(),
        });
    }
    let block = dot_block(
        queries.data(),
        queries.len(),
        gallery.data(),
        gallery.len(),
        queries.dim(),
        exec,
    );
    ScoreMatrix::new(
        queries.ids().to_vec(),
        gallery.ids().to_vec(),
        block.into_iter().map(f64::from).collect(),
        ScoreKind::Cosine,
    )
}

/// A point on the unit hyperboloid, stored in ambient `D+1` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

impl LorentzPoint {
    pub fn origin(dim: usize) -> Self {
        let mut coords = vec![0.0; dim + 1];
        coords[0] = 1.0;
        LorentzPoint { coords }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Spatial dimension `D`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }
}

pub fn lorentz_inner(u: &LorentzPoint, v: &LorentzPoint) -> f64 {
    minkowski_dot(&u.coords, &v.coords)
}

pub(crate) fn minkowski_dot(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    let spatial: f64 = u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
    spatial - u[0] * v[0]
}

/// Geodesic distance `arccosh(-<u,v>_L)`.
///
/// Evaluated as `2 asinh(|u - v|_L / 2)`, which is the same quantity on the
/// manifold but keeps full precision for nearby points. Inputs with
/// `-<u,v>_L < 1 - ARCCOSH_TOLERANCE` are rejected as off-manifold.
pub fn lorentz_distance(u: &LorentzPoint, v: &LorentzPoint) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let arg = -lorentz_inner(u, v);
    if !(arg >= 1.0 - ARCCOSH_TOLERANCE) {
        return Err(Error::OffManifold(arg));
    }
    Ok(chordal_distance(&u.coords, &v.coords))
}

pub(crate) fn chordal_distance(u: &[f64], v: &[f64]) -> f64 {
    let mut sq = 0.0;
    for i in 1..u.len() {
        let w = u[i] - v[i];
        sq += w * w;
    }
    let w0 = u[0] - v[0];
    sq -= w0 * w0;
    2.0 * (sq.max(0.0).sqrt() / 2.0).asinh()
}

/// Rescales `t` to norm [`TANGENT_CLIP`] when it is longer.
pub fn clip_tangent(t: &[f64]) -> Vec<f64> {
    let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > TANGENT_CLIP {
        t.iter().map(|x| x * TANGENT_CLIP / norm).collect()
    } else {
        t.to_vec()
    }
}

/// Exponential map at the origin, after tangent clipping.
pub fn exp_map_origin(t: &[f64]) -> LorentzPoint {
    let v = clip_tangent(t);
    let r = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut coords = Vec::with_capacity(v.len() + 1);
    coords.push(r.cosh());
    if r == 0.0 {
        coords.extend(std::iter::repeat_n(0.0, v.len()));
    } else {
        let k = r.sinh() / r;
        coords.extend(v.iter().map(|x| x * k));
    }
    LorentzPoint { coords }
}

/// Logarithmic map at the origin; inverse of [`exp_map_origin`] on clipped tangents.
pub fn log_map_origin(p: &LorentzPoint) -> Vec<f64> {
    let spatial = &p.coords[1..];
    let s = spatial.iter().map(|x| x * x).sum::<f64>().sqrt();
    if s == 0.0 {
        return vec![0.0; spatial.len()];
    }
    let r = s.asinh();
    spatial.iter().map(|x| x * r / s).collect()
}

/// `exp(-d)` scores between two point sets.
pub fn exp_neg_distance_scores(
    query_ids: &[String],
    points_q: &[LorentzPoint],
    gallery_ids: &[String],
    points_g: &[LorentzPoint],
) -> Result<ScoreMatrix> {
    exp_neg_distance_scores_with(Execution::default(), query_ids, points_q, gallery_ids, points_g)
}

pub fn exp_neg_distance_scores_with(
    exec: Execution,
    query_ids: &[String],
    points_q: &[LorentzPoint],
    gallery_ids: &[String],
    points_g: &[LorentzPoint],
) -> Result<ScoreMatrix> {
    if query_ids.len() != points_q.len() || gallery_ids.len() != points_g.len() {
        return Err(Error::invalid("id and point lists differ in length"));
    }
    let rows: Vec<Result<Vec<f64>>> = exec.map(points_q.len(), |qi| {
        points_g
            .iter()
            .map(|g| lorentz_distance(&points_q[qi], g).map(|d| (-d).exp()))
            .collect()
    });
    let mut scores = Vec::with_capacity(points_q.len() * points_g.len());
    for r in rows {
        scores.extend(r?);
    }
    ScoreMatrix::new(
        query_ids.to_vec(),
        gallery_ids.to_vec(),
        scores,
        ScoreKind::ExpNegLorentz,
    )
}

/// Lifts every tangent row of `m` onto the hyperboloid.
pub fn to_lorentz_points(m: &EmbeddingMatrix) -> Vec<LorentzPoint> {
    (0..m.len())
        .map(|i| {
            let t: Vec<f64> = m.row(i).iter().map(|&x| x as f64).collect();
            exp_map_origin(&t)
        })
        .collect()
}

/// The model's native retrieval score: cosine on normalised rows for
/// Euclidean matrices, `exp(-d)` for Lorentz tangent matrices.
pub fn native_scores(queries: &EmbeddingMatrix, gallery: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    native_scores_with(Execution::default(), queries, gallery)
}

pub fn native_scores_with(
    exec: Execution,
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
) -> Result<ScoreMatrix> {
    if queries.space != gallery.space {
        return Err(Error::invalid(format!(
            "cannot score {:?} queries against a {:?} gallery",
            queries.space, gallery.space
        )));
    }
    match queries.space {
        Space::Euclidean => cosine_scores_with(exec, &l2_normalize(queries)?, &l2_normalize(gallery)?),
        Space::LorentzTangent => {
            if queries.dim() != gallery.dim() {
                return Err(Error::DimensionMismatch {
                    left: queries.dim(),
                    right: gallery.dim(),
                });
            }
            exp_neg_distance_scores_with(
                exec,
                queries.ids(),
                &to_lorentz_points(queries),
                gallery.ids(),
                &to_lorentz_points(gallery),
            )
        }
    }
}

/// Native score between two single rows (used for per-image mirror scores).
pub fn native_pair_score(space: Space, a: &[f32], b: &[f32]) -> f64 {
    let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    match space {
        Space::Euclidean => {
            let na = a64.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b64.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = a64.iter().zip(&b64).map(|(x, y)| x * y).sum();
            dot / (na * nb)
        }
        Space::LorentzTangent => {
            let pa = exp_map_origin(&a64);
            let pb = exp_map_origin(&b64);
            (-chordal_distance(pa.coords(), pb.coords())).exp()
        }
    }
}
