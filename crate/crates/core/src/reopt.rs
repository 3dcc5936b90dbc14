//! Knowledge-aware re-optimization of detection scores.
//!
//! Given backbone scores `P` (boxes × labels) and a consistency matrix `S`,
//! the re-optimized scores `P̂` minimize
//!
//! ```text
//! E(P̂) = (1−ε) Σ_{b≠b'} Σ_{l,l'} S[l][l'] (P̂[b][l] − P̂[b'][l'])²
//!       +   ε  Σ_b Σ_l B·S_row(l) (P̂[b][l] − P[b][l])²
//! ```
//!
//! where `S_row(l) = Σ_l' S[l][l']`. Sums only range over active entries
//! (a box's top classes) and coupled box pairs (each box with its
//! highest-ranked neighbors). `E` is quadratic, so its stationary point solves
//! a linear system; the default solver is a Jacobi fixed-point iteration on
//! that system.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyMatrix;
use crate::error::{Error, Result};
use crate::model::{top_k_indices, Detection, ImageDetections};

/// Dense row-major score matrix, one row per box.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged score rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, b: usize, l: usize) -> f64 {
        self.data[b * self.cols + l]
    }

    #[inline]
    pub fn set(&mut self, b: usize, l: usize, v: f64) {
        self.data[b * self.cols + l] = v;
    }

    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.cols..(b + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs_diff(&self, other: &ScoreMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Which (box, class) entries take part in the energy and which box pairs
/// are coupled by its pairwise term.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    boxes: usize,
    labels: usize,
    active: Vec<bool>,
    /// Active classes per box, ascending.
    active_classes: Vec<Vec<usize>>,
    /// Symmetric neighbor lists, ascending, never containing the box itself.
    neighbors: Vec<Vec<usize>>,
}

impl Coupling {
    /// Every entry active, every pair of boxes coupled.
    pub fn dense(boxes: usize, labels: usize) -> Self {
        Self::from_mask(vec![true; boxes * labels], boxes, labels)
    }

    /// The given B×L mask (row-major) with every pair of boxes coupled.
    pub fn from_mask(active: Vec<bool>, boxes: usize, labels: usize) -> Self {
        let neighbors = (0..boxes)
            .map(|b| (0..boxes).filter(|&o| o != b).collect())
            .collect();
        Self::new(active, boxes, labels, neighbors)
    }

    fn new(active: Vec<bool>, boxes: usize, labels: usize, neighbors: Vec<Vec<usize>>) -> Self {
        assert_eq!(active.len(), boxes * labels);
        let active_classes = (0..boxes)
            .map(|b| (0..labels).filter(|&l| active[b * labels + l]).collect())
            .collect();
        Self {
            boxes,
            labels,
            active,
            active_classes,
            neighbors,
        }
    }

    /// Mask and neighborhoods used by the re-optimization pipeline:
    /// each box's `classes_considered` top-scoring foreground classes are
    /// active, and each box is coupled with its `neighbor_boxes`
    /// highest-ranked other boxes (union over both directions).
    /// All ties go to the lower index.
    pub fn from_scores(
        p: &ScoreMatrix,
        classes_considered: usize,
        neighbor_boxes: usize,
        background: Option<usize>,
    ) -> Self {
        let (boxes, labels) = (p.rows(), p.cols());
        let mut active = vec![false; boxes * labels];
        let mut rank_score = vec![0.0; boxes];
        for b in 0..boxes {
            let row = p.row(b);
            let mut classes: Vec<usize> = (0..labels).filter(|&l| Some(l) != background).collect();
            classes.sort_by(|&x, &y| row[y].total_cmp(&row[x]));
            rank_score[b] = classes.first().map_or(0.0, |&l| row[l]);
            for &l in classes.iter().take(classes_considered) {
                active[b * labels + l] = true;
            }
        }
        let mut order: Vec<usize> = (0..boxes).collect();
        order.sort_by(|&x, &y| rank_score[y].total_cmp(&rank_score[x]));
        let mut adj = vec![vec![false; boxes]; boxes];
        for b in 0..boxes {
            for &o in order.iter().filter(|&&o| o != b).take(neighbor_boxes) {
                adj[b][o] = true;
                adj[o][b] = true;
            }
        }
        let neighbors = adj
            .iter()
            .map(|row| (0..boxes).filter(|&o| row[o]).collect())
            .collect();
        Self::new(active, boxes, labels, neighbors)
    }

    #[inline]
    pub fn is_active(&self, b: usize, l: usize) -> bool {
        self.active[b * self.labels + l]
    }

    pub fn neighbors(&self, b: usize) -> &[usize] {
        &self.neighbors[b]
    }

    fn check(&self, p: &ScoreMatrix, s: &ConsistencyMatrix) -> Result<()> {
        if p.rows() != self.boxes || p.cols() != self.labels {
            return Err(Error::DimensionMismatch(format!(
                "scores are {}x{}, coupling is {}x{}",
                p.rows(),
                p.cols(),
                self.boxes,
                self.labels
            )));
        }
        if s.len() != self.labels {
            return Err(Error::DimensionMismatch(format!(
                "consistency matrix has {} labels, scores have {}",
                s.len(),
                self.labels
            )));
        }
        Ok(())
    }
}

/// Evaluates the two-term energy at `p_hat`.
pub fn energy(
    p_hat: &ScoreMatrix,
    p: &ScoreMatrix,
    s: &ConsistencyMatrix,
    epsilon: f64,
    coupling: &Coupling,
) -> Result<f64> {
    coupling.check(p, s)?;
    coupling.check(p_hat, s)?;
    let boxes = p.rows() as f64;
    let mut pairwise = 0.0;
    let mut fidelity = 0.0;
    for b in 0..coupling.boxes {
        for &l in &coupling.active_classes[b] {
            let x = p_hat.get(b, l);
            for &o in &coupling.neighbors[b] {
                for &m in &coupling.active_classes[o] {
                    let d = x - p_hat.get(o, m);
                    pairwise += s.get(l, m) * d * d;
                }
            }
            let d = x - p.get(b, l);
            fidelity += boxes * s.row_sum(l) * d * d;
        }
    }
    Ok((1.0 - epsilon) * pairwise + epsilon * fidelity)
}

/// Linear stationarity system `diag·x − coupling·x − rhs = ∇E` for one entry.
struct Stationarity<'a> {
    p: &'a ScoreMatrix,
    s: &'a ConsistencyMatrix,
    coupling: &'a Coupling,
    pair_weight: f64,
    fid_weight: f64,
    row_sums: Vec<f64>,
}

impl<'a> Stationarity<'a> {
    fn new(
        p: &'a ScoreMatrix,
        s: &'a ConsistencyMatrix,
        epsilon: f64,
        coupling: &'a Coupling,
    ) -> Self {
        let row_sums = (0..s.len()).map(|l| s.row_sum(l)).collect();
        Self {
            p,
            s,
            coupling,
            // ordered pairs count every unordered pair twice
            pair_weight: 4.0 * (1.0 - epsilon),
            fid_weight: 2.0 * epsilon * p.rows() as f64,
            row_sums,
        }
    }

    /// An entry is free when it is active and has a nonzero fidelity weight;
    /// every other entry keeps its backbone score.
    fn is_free(&self, b: usize, l: usize) -> bool {
        self.coupling.is_active(b, l) && self.row_sums[l] > 0.0
    }

    /// (total coupling weight, Σ weight·x over coupled entries)
    fn coupled(&self, x: &ScoreMatrix, b: usize, l: usize) -> (f64, f64) {
        let srow = &self.s.rows()[l];
        let (mut weight, mut weighted) = (0.0, 0.0);
        for &o in &self.coupling.neighbors[b] {
            for &m in &self.coupling.active_classes[o] {
                let w = srow[m];
                weight += w;
                weighted += w * x.get(o, m);
            }
        }
        (weight, weighted)
    }

    /// Returns (diagonal, right-hand side) so that ∂E/∂x[b][l] = diag·x[b][l] − rhs.
    fn equation(&self, x: &ScoreMatrix, b: usize, l: usize) -> (f64, f64) {
        let (weight, weighted) = self.coupled(x, b, l);
        let fid = self.fid_weight * self.row_sums[l];
        (
            self.pair_weight * weight + fid,
            self.pair_weight * weighted + fid * self.p.get(b, l),
        )
    }

    fn gradient_max_norm(&self, x: &ScoreMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        for b in 0..self.coupling.boxes {
            for &l in &self.coupling.active_classes[b] {
                if self.is_free(b, l) {
                    let (d, r) = self.equation(x, b, l);
                    let g = d * x.get(b, l) - r;
                    if !g.is_finite() {
                        return f64::INFINITY;
                    }
                    worst = worst.max(g.abs());
                }
            }
        }
        worst
    }
}

/// Analytic gradient of [`energy`]; zero on inactive entries.
pub fn energy_gradient(
    p_hat: &ScoreMatrix,
    p: &ScoreMatrix,
    s: &ConsistencyMatrix,
    epsilon: f64,
    coupling: &Coupling,
) -> Result<ScoreMatrix> {
    coupling.check(p, s)?;
    coupling.check(p_hat, s)?;
    let sys = Stationarity::new(p, s, epsilon, coupling);
    let mut g = ScoreMatrix::zeros(p.rows(), p.cols());
    for b in 0..p.rows() {
        for &l in &coupling.active_classes[b] {
            let (d, r) = sys.equation(p_hat, b, l);
            g.set(b, l, d * p_hat.get(b, l) - r);
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    /// Jacobi fixed-point iteration on the stationarity equations.
    #[default]
    Jacobi,
    /// LU factorization of the full stationarity system. Meant for small problems.
    Dense,
}

/// Hyperparameters of the re-optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReoptConfig {
    pub epsilon: f64,
    pub top_k_detections: usize,
    pub neighbor_boxes: usize,
    pub classes_considered: usize,
    pub post_score_threshold: f64,
    /// Max-norm of the energy gradient at which the solver stops.
    pub solver_tolerance: f64,
    pub solver_max_iterations: usize,
    pub allow_epsilon_above_one: bool,
    pub solver: SolverKind,
}

impl Default for ReoptConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.75,
            top_k_detections: 100,
            neighbor_boxes: 99,
            classes_considered: 3,
            post_score_threshold: 0.0,
            solver_tolerance: 1e-9,
            solver_max_iterations: 100_000,
            allow_epsilon_above_one: false,
            solver: SolverKind::Jacobi,
        }
    }
}

impl ReoptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.epsilon >= 1.0 && !self.allow_epsilon_above_one {
            return Err(Error::Config(format!(
                "epsilon {} is not below 1; pass allow_epsilon_above_one to use this regime",
                self.epsilon
            )));
        }
        if self.classes_considered == 0 || self.neighbor_boxes == 0 {
            return Err(Error::Config(
                "classes_considered and neighbor_boxes must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.post_score_threshold) {
            return Err(Error::Config(format!(
                "post_score_threshold must lie in [0, 1], got {}",
                self.post_score_threshold
            )));
        }
        if !(self.solver_tolerance > 0.0) || self.solver_max_iterations == 0 {
            return Err(Error::Config(
                "solver tolerance must be positive and max iterations at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Result of one solve.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Re-optimized scores, clamped to [0, 1].
    pub scores: ScoreMatrix,
    pub iterations: usize,
    /// Gradient max-norm at the unclamped solution.
    pub residual: f64,
}

// beyond this the iterate is treated as diverged
const DIVERGENCE_LIMIT: f64 = 1e100;

fn solve_jacobi(
    p: &ScoreMatrix,
    s: &ConsistencyMatrix,
    epsilon: f64,
    coupling: &Coupling,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(ScoreMatrix, usize, f64)> {
    let sys = Stationarity::new(p, s, epsilon, coupling);
    let free: Vec<(usize, usize)> = (0..p.rows())
        .flat_map(|b| coupling.active_classes[b].iter().map(move |&l| (b, l)))
        .filter(|&(b, l)| sys.is_free(b, l))
        .collect();
    let mut x = p.clone();
    // entries without any coupling weight are solved exactly by x = P
    let mut free_coupled = Vec::with_capacity(free.len());
    for &(b, l) in &free {
        let (diag, _) = sys.equation(&x, b, l);
        if diag == 0.0 || !diag.is_finite() {
            return Err(Error::NonConvergence {
                iterations: 0,
                residual: f64::INFINITY,
            });
        }
        if sys.coupled(&x, b, l).0 > 0.0 {
            free_coupled.push((b, l));
        }
    }
    let mut next = x.clone();
    let mut iterations = 0;
    loop {
        let residual = sys.gradient_max_norm(&x);
        if residual <= tolerance {
            return Ok((x, iterations, residual));
        }
        if iterations >= max_iterations || !(residual < DIVERGENCE_LIMIT) {
            return Err(Error::NonConvergence {
                iterations,
                residual,
            });
        }
        for &(b, l) in &free_coupled {
            let (d, r) = sys.equation(&x, b, l);
            next.set(b, l, r / d);
        }
        std::mem::swap(&mut x, &mut next);
        iterations += 1;
    }
}

/// Solves the stationarity system directly by LU factorization.
/// Returns the unclamped stationary point.
pub fn solve_dense(
    p: &ScoreMatrix,
    s: &ConsistencyMatrix,
    epsilon: f64,
    coupling: &Coupling,
) -> Result<ScoreMatrix> {
    coupling.check(p, s)?;
    let sys = Stationarity::new(p, s, epsilon, coupling);
    let mut index = vec![usize::MAX; p.rows() * p.cols()];
    let mut free = Vec::new();
    for b in 0..p.rows() {
        for &l in &coupling.active_classes[b] {
            if sys.is_free(b, l) {
                index[b * p.cols() + l] = free.len();
                free.push((b, l));
            }
        }
    }
    let n = free.len();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut rhs = nalgebra::DVector::<f64>::zeros(n);
    for (i, &(b, l)) in free.iter().enumerate() {
        let fid = sys.fid_weight * sys.row_sums[l];
        a[(i, i)] += fid;
        rhs[i] = fid * p.get(b, l);
        for &o in &coupling.neighbors[b] {
            for &m in &coupling.active_classes[o] {
                let w = sys.pair_weight * s.get(l, m);
                if w == 0.0 {
                    continue;
                }
                a[(i, i)] += w;
                let j = index[o * p.cols() + m];
                // a partner with zero row sum cannot carry weight here
                debug_assert!(j != usize::MAX);
                a[(i, j)] -= w;
            }
        }
    }
    let x = a.lu().solve(&rhs).ok_or(Error::NonConvergence {
        iterations: 0,
        residual: f64::INFINITY,
    })?;
    let mut out = p.clone();
    for (i, &(b, l)) in free.iter().enumerate() {
        out.set(b, l, x[i]);
    }
    Ok(out)
}

/// Minimizes the energy with an explicit coupling.
pub fn minimize_with(
    p: &ScoreMatrix,
    s: &ConsistencyMatrix,
    cfg: &ReoptConfig,
    coupling: &Coupling,
) -> Result<Solution> {
    cfg.validate()?;
    coupling.check(p, s)?;
    let (mut scores, iterations, residual) = match cfg.solver {
        SolverKind::Jacobi => solve_jacobi(
            p,
            s,
            cfg.epsilon,
            coupling,
            cfg.solver_tolerance,
            cfg.solver_max_iterations,
        )?,
        SolverKind::Dense => {
            let x = solve_dense(p, s, cfg.epsilon, coupling)?;
            let residual = Stationarity::new(p, s, cfg.epsilon, coupling).gradient_max_norm(&x);
            if !(residual <= cfg.solver_tolerance) {
                return Err(Error::NonConvergence {
                    iterations: 1,
                    residual,
                });
            }
            (x, 1, residual)
        }
    };
    if scores.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonConvergence {
            iterations,
            residual,
        });
    }
    scores.clamp_unit();
    Ok(Solution {
        scores,
        iterations,
        residual,
    })
}

/// Minimizes the energy with the coupling derived from `cfg`
/// (class and neighbor limits). No background class is assumed.
pub fn minimize(p: &ScoreMatrix, s: &ConsistencyMatrix, cfg: &ReoptConfig) -> Result<Solution> {
    if p.rows() == 0 {
        return Err(Error::DimensionMismatch("no boxes to re-optimize".into()));
    }
    let coupling = Coupling::from_scores(p, cfg.classes_considered, cfg.neighbor_boxes, None);
    minimize_with(p, s, cfg, &coupling)
}

/// One changed (or unchanged) score of a selected detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDelta {
    pub image_id: String,
    /// Index of the detection in the input image.
    pub det_index: usize,
    pub class: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub image_id: String,
    pub iterations: usize,
    pub residual: f64,
}

/// Re-optimization output of a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageReopt {
    /// Detections that survived the post-optimization threshold.
    pub detections: ImageDetections,
    /// One entry per (selected detection, class).
    pub deltas: Vec<ScoreDelta>,
    pub stats: SolverStats,
}

/// Selects the top detections, re-optimizes their scores, and drops those
/// whose new maximum falls below the threshold.
pub fn reoptimize_image(
    dets: &ImageDetections,
    s: &ConsistencyMatrix,
    cfg: &ReoptConfig,
) -> Result<ImageReopt> {
    cfg.validate()?;
    let vocab = s.vocab();
    let background = vocab.background();
    dets.validate(vocab)?;
    let selected = top_k_indices(dets, cfg.top_k_detections, background);
    let empty = || ImageDetections {
        image_id: dets.image_id.clone(),
        image_width: dets.image_width,
        image_height: dets.image_height,
        detections: Vec::new(),
    };
    if selected.is_empty() {
        return Ok(ImageReopt {
            detections: empty(),
            deltas: Vec::new(),
            stats: SolverStats {
                image_id: dets.image_id.clone(),
                iterations: 0,
                residual: 0.0,
            },
        });
    }
    let rows: Vec<Vec<f64>> = selected
        .iter()
        .map(|&i| dets.detections[i].scores.clone())
        .collect();
    let p = ScoreMatrix::from_rows(&rows)?;
    let coupling =
        Coupling::from_scores(&p, cfg.classes_considered, cfg.neighbor_boxes, background);
    let sol = minimize_with(&p, s, cfg, &coupling)?;

    let mut out = empty();
    let mut deltas = Vec::with_capacity(selected.len() * p.cols());
    for (row, &idx) in selected.iter().enumerate() {
        let det = &dets.detections[idx];
        let scores = sol.scores.row(row).to_vec();
        for (class, (&before, &after)) in det.scores.iter().zip(&scores).enumerate() {
            deltas.push(ScoreDelta {
                image_id: dets.image_id.clone(),
                det_index: idx,
                class,
                before,
                after,
            });
        }
        let new = Detection::new(det.bbox, scores);
        if new.rank_score(background) >= cfg.post_score_threshold {
            out.detections.push(new);
        }
    }
    Ok(ImageReopt {
        detections: out,
        deltas,
        stats: SolverStats {
            image_id: dets.image_id.clone(),
            iterations: sol.iterations,
            residual: sol.residual,
        },
    })
}

/// Re-optimization output of a whole detection set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReoptResult {
    pub images: Vec<ImageDetections>,
    pub per_detection_deltas: Vec<ScoreDelta>,
    pub solver_stats: Vec<SolverStats>,
}

/// Re-optimizes every image independently (in parallel); output order
/// follows input order.
pub fn reoptimize_all(
    images: &[ImageDetections],
    s: &ConsistencyMatrix,
    cfg: &ReoptConfig,
) -> Result<ReoptResult> {
    let per_image: Vec<ImageReopt> = images
        .par_iter()
        .map(|img| reoptimize_image(img, s, cfg))
        .collect::<Result<_>>()?;
    let mut result = ReoptResult::default();
    for r in per_image {
        result.images.push(r.detections);
        result.per_detection_deltas.extend(r.deltas);
        result.solver_stats.push(r.stats);
    }
    Ok(result)
}

/// Writes the deltas sidecar: `image_id,det_index,class,before,after`.
pub fn write_deltas_csv<W: Write>(writer: W, deltas: &[ScoreDelta]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for d in deltas {
        w.serialize(d)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_deltas_csv<R: Read>(reader: R) -> Result<Vec<ScoreDelta>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize()
        .map(|rec| rec.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consistency::SourceTag;
    use crate::model::{BoundingBox, LabelVocabulary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(values: Vec<Vec<f64>>) -> ConsistencyMatrix {
        let n = values.len();
        let vocab = LabelVocabulary::new((0..n).map(|i| format!("c{i}"))).unwrap();
        ConsistencyMatrix::new(values, vocab, SourceTag::Frequency).unwrap()
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (ScoreMatrix, ConsistencyMatrix) {
        let b = rng.gen_range(1..=6);
        let l = rng.gen_range(1..=5);
        let mut s = vec![vec![0.0; l]; l];
        for i in 0..l {
            for j in i..l {
                let v = rng.gen_range(0.0..1.0);
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        let rows: Vec<Vec<f64>> = (0..b)
            .map(|_| (0..l).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        (ScoreMatrix::from_rows(&rows).unwrap(), matrix(s))
    }

    fn cfg(epsilon: f64) -> ReoptConfig {
        ReoptConfig {
            epsilon,
            neighbor_boxes: 1000,
            classes_considered: 1000,
            solver_tolerance: 1e-11,
            allow_epsilon_above_one: epsilon >= 1.0,
            ..ReoptConfig::default()
        }
    }

    /// Energy by a literal quadruple loop over the formula, all entries active.
    fn energy_oracle(x: &ScoreMatrix, p: &ScoreMatrix, s: &ConsistencyMatrix, eps: f64) -> f64 {
        let (bn, ln) = (p.rows(), p.cols());
        let mut first = 0.0;
        for b in 0..bn {
            for o in 0..bn {
                if o == b {
                    continue;
                }
                for l in 0..ln {
                    for m in 0..ln {
                        first += s.get(l, m) * (x.get(b, l) - x.get(o, m)).powi(2);
                    }
                }
            }
        }
        let mut second = 0.0;
        for b in 0..bn {
            for l in 0..ln {
                let srow: f64 = (0..ln).map(|m| s.get(l, m)).sum();
                second += bn as f64 * srow * (x.get(b, l) - p.get(b, l)).powi(2);
            }
        }
        (1.0 - eps) * first + eps * second
    }

    #[test]
    fn energy_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (p, s) = random_instance(&mut rng);
            let x = ScoreMatrix::from_rows(
                &(0..p.rows())
                    .map(|_| (0..p.cols()).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let c = Coupling::dense(p.rows(), p.cols());
            let e = energy(&x, &p, &s, 0.3, &c).unwrap();
            let o = energy_oracle(&x, &p, &s, 0.3);
            assert!((e - o).abs() <= 1e-10 * o.abs().max(1.0));
        }
    }

    #[test]
    fn energy_zero_s() {
        let p = ScoreMatrix::from_rows(&[vec![0.2, 0.7], vec![0.9, 0.1]]).unwrap();
        let x = ScoreMatrix::from_rows(&[vec![0.5, 0.3], vec![0.0, 1.0]]).unwrap();
        let s = matrix(vec![vec![0.0; 2]; 2]);
        assert_eq!(
            energy(&x, &p, &s, 0.4, &Coupling::dense(2, 2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn energy_single_box() {
        let p = ScoreMatrix::from_rows(&[vec![0.2, 0.7]]).unwrap();
        let x = ScoreMatrix::from_rows(&[vec![0.5, 0.3]]).unwrap();
        let s = matrix(vec![vec![1.0, 0.5], vec![0.5, 2.0]]);
        let expected = 0.4 * (1.5 * 0.3f64.powi(2) + 2.5 * 0.4f64.powi(2));
        let e = energy(&x, &p, &s, 0.4, &Coupling::dense(1, 2)).unwrap();
        assert!((e - expected).abs() < 1e-15);
    }

    #[test]
    fn energy_identical_rows_at_p() {
        // P̂ = P with identical rows: only l ≠ l' pairs contribute.
        let p = ScoreMatrix::from_rows(&[vec![0.8, 0.1], vec![0.8, 0.1]]).unwrap();
        let s = matrix(vec![vec![1.0, 0.5], vec![0.5, 1.0]]);
        let e = energy(&p, &p, &s, 0.25, &Coupling::dense(2, 2)).unwrap();
        // ordered pairs (0,1),(1,0); per pair 2·0.5·0.7²
        let expected = 0.75 * 2.0 * (2.0 * 0.5 * 0.49);
        assert!((e - expected).abs() < 1e-14);
        assert!((e - energy_oracle(&p, &p, &s, 0.25)).abs() < 1e-14);
    }

    #[test]
    fn dimension_mismatch() {
        let p = ScoreMatrix::from_rows(&[vec![0.2, 0.7]]).unwrap();
        let s = matrix(vec![vec![1.0]]);
        assert!(matches!(
            energy(&p, &p, &s, 0.5, &Coupling::dense(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn epsilon_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (p, s) = random_instance(&mut rng);
            let out = minimize(&p, &s, &cfg(1.0)).unwrap();
            assert!(out.scores.max_abs_diff(&p) <= 1e-12);
        }
    }

    #[test]
    fn epsilon_at_one_requires_flag() {
        let p = ScoreMatrix::from_rows(&[vec![0.2, 0.7]]).unwrap();
        let s = matrix(vec![vec![1.0, 0.5], vec![0.5, 2.0]]);
        let c = ReoptConfig {
            epsilon: 1.0,
            ..ReoptConfig::default()
        };
        assert!(matches!(minimize(&p, &s, &c), Err(Error::Config(_))));
        let c = ReoptConfig {
            epsilon: 0.0,
            ..ReoptConfig::default()
        };
        assert!(matches!(minimize(&p, &s, &c), Err(Error::Config(_))));
    }

    #[test]
    fn anti_diagonal_s_fixed_point() {
        // Each box's top label is fully consistent with the other box's top
        // label, so E(P) = 0 and P itself is the minimizer.
        let p = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = matrix(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = minimize(&p, &s, &cfg(0.5)).unwrap();
        let dense = solve_dense(&p, &s, 0.5, &Coupling::dense(2, 2)).unwrap();
        assert!(out.scores.max_abs_diff(&dense) < 1e-9);
        assert!(out.scores.max_abs_diff(&p) < 1e-9);
        assert_eq!(
            energy(&p, &p, &s, 0.5, &Coupling::dense(2, 2)).unwrap(),
            0.0
        );
    }

    #[test]
    fn cross_class_pull() {
        let p = ScoreMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let s = matrix(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let out = minimize(&p, &s, &cfg(0.5)).unwrap();
        let dense = solve_dense(&p, &s, 0.5, &Coupling::dense(2, 2)).unwrap();
        assert!(out.scores.max_abs_diff(&dense) < 1e-9);
        assert!(out.scores.get(0, 0) < 1.0);
        assert!(out.scores.get(0, 1) > 0.0);
        // by symmetry a = P̂[b][0], c = P̂[b][1]; with ε = 0.5, B = 2:
        //   2(a − c) + 2(a − 1) = 0  and  2(c − a) + 2c = 0  ⇒  a = 2/3, c = 1/3
        for b in 0..2 {
            assert!((out.scores.get(b, 0) - 2.0 / 3.0).abs() < 1e-9);
            assert!((out.scores.get(b, 1) - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn diagonal_s_pulls_toward_mean() {
        // S diagonal: each label couples only with itself across boxes.
        // Closed form for box b, label l with B boxes and weight s:
        //   4(1−ε)s·Σ_{o≠b}(x_b − x_o) + 2εB·s·(x_b − p_b) = 0
        // Summing over b gives mean(x) = mean(p); then
        //   x_b = (4(1−ε)·B·mean + 2εB·p_b) / (4(1−ε)·B + 2εB)
        let rows = vec![vec![0.9, 0.1], vec![0.3, 0.5], vec![0.6, 0.2]];
        let p = ScoreMatrix::from_rows(&rows).unwrap();
        let s = matrix(vec![vec![2.0, 0.0], vec![0.0, 0.5]]);
        let eps = 0.6;
        let out = minimize(&p, &s, &cfg(eps)).unwrap();
        let bn = 3.0;
        for l in 0..2 {
            let mean = (0..3).map(|b| p.get(b, l)).sum::<f64>() / bn;
            for b in 0..3 {
                let expected = (4.0 * (1.0 - eps) * bn * mean + 2.0 * eps * bn * p.get(b, l))
                    / (4.0 * (1.0 - eps) * bn + 2.0 * eps * bn);
                assert!((out.scores.get(b, l) - expected).abs() < 1e-9);
            }
        }
        // numeric gradient descent reaches the same point
        let c = Coupling::dense(3, 2);
        let mut x = p.clone();
        for _ in 0..20_000 {
            let g = energy_gradient(&x, &p, &s, eps, &c).unwrap();
            for b in 0..3 {
                for l in 0..2 {
                    x.set(b, l, x.get(b, l) - 0.01 * g.get(b, l));
                }
            }
        }
        assert!(x.max_abs_diff(&out.scores) < 1e-8);
    }

    #[test]
    fn jacobi_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (p, s) = random_instance(&mut rng);
            let eps = [0.25, 0.5, 0.75, 0.9][rng.gen_range(0..4)];
            let out = minimize(&p, &s, &cfg(eps)).unwrap();
            let dense = solve_dense(&p, &s, eps, &Coupling::dense(p.rows(), p.cols())).unwrap();
            assert!(out.scores.max_abs_diff(&dense) < 1e-8);
            let dense_cfg = ReoptConfig {
                solver: SolverKind::Dense,
                ..cfg(eps)
            };
            assert!(
                minimize(&p, &s, &dense_cfg)
                    .unwrap()
                    .scores
                    .max_abs_diff(&dense)
                    < 1e-12
            );
        }
    }

    #[test]
    fn masked_problem_leaves_inactive_entries() {
        let p = ScoreMatrix::from_rows(&[
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.7, 0.2],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let s = matrix(vec![
            vec![1.0, 0.4, 0.1],
            vec![0.4, 1.0, 0.3],
            vec![0.1, 0.3, 1.0],
        ]);
        let c = ReoptConfig {
            classes_considered: 1,
            neighbor_boxes: 1,
            ..cfg(0.5)
        };
        let out = minimize(&p, &s, &c).unwrap();
        let coupling = Coupling::from_scores(&p, 1, 1, None);
        for b in 0..3 {
            for l in 0..3 {
                if !coupling.is_active(b, l) {
                    assert_eq!(out.scores.get(b, l), p.get(b, l));
                }
            }
        }
        // box 0 ranks first, so every box is coupled with it
        assert_eq!(coupling.neighbors(0), [1, 2]);
        assert_eq!(coupling.neighbors(1), [0]);
        let g = energy_gradient(&out.scores, &p, &s, 0.5, &coupling).unwrap();
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_row_entries_unchanged() {
        let p = ScoreMatrix::from_rows(&[vec![0.9, 0.3], vec![0.2, 0.6]]).unwrap();
        let s = matrix(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let out = minimize(&p, &s, &cfg(0.5)).unwrap();
        assert_eq!(out.scores.get(0, 1), 0.3);
        assert_eq!(out.scores.get(1, 1), 0.6);
    }

    #[test]
    fn above_one_never_returns_non_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let (p, s) = random_instance(&mut rng);
            let c = ReoptConfig {
                solver_max_iterations: 2_000,
                ..cfg(1.5)
            };
            match minimize(&p, &s, &c) {
                Ok(sol) => {
                    assert!(sol.residual <= c.solver_tolerance);
                    assert!(sol.scores.as_slice().iter().all(|v| v.is_finite()));
                }
                Err(Error::NonConvergence { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    fn image(rows: &[Vec<f64>]) -> ImageDetections {
        ImageDetections {
            image_id: "img".into(),
            image_width: 100.0,
            image_height: 100.0,
            detections: rows
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    Detection::new(
                        BoundingBox::new(i as f64, 0.0, 5.0, 5.0).unwrap(),
                        r.clone(),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn empty_image() {
        let s = matrix(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = reoptimize_image(&image(&[]), &s, &ReoptConfig::default()).unwrap();
        assert!(out.detections.detections.is_empty());
        assert!(out.deltas.is_empty());
    }

    #[test]
    fn dense_pipeline_equals_minimize() {
        let rows = vec![
            vec![0.9, 0.1, 0.0],
            vec![0.2, 0.5, 0.3],
            vec![0.05, 0.15, 0.8],
            vec![0.4, 0.4, 0.2],
        ];
        let s = matrix(vec![
            vec![0.8, 0.2, 0.1],
            vec![0.2, 0.6, 0.0],
            vec![0.1, 0.0, 0.9],
        ]);
        let c = ReoptConfig {
            epsilon: 0.4,
            top_k_detections: 100,
            neighbor_boxes: rows.len() - 1,
            classes_considered: 3,
            post_score_threshold: 0.0,
            ..ReoptConfig::default()
        };
        let out = reoptimize_image(&image(&rows), &s, &c).unwrap();
        let sol = minimize_with(
            &ScoreMatrix::from_rows(&rows).unwrap(),
            &s,
            &c,
            &Coupling::dense(4, 3),
        )
        .unwrap();
        for (b, det) in out.detections.detections.iter().enumerate() {
            assert_eq!(det.scores, sol.scores.row(b));
        }
        assert_eq!(out.deltas.len(), 12);
        assert_eq!(out.deltas[4].det_index, 1);
        assert_eq!(out.deltas[4].class, 1);
        assert_eq!(out.deltas[4].before, 0.5);
    }

    #[test]
    fn threshold_and_top_k_selection() {
        let rows = vec![vec![0.9, 0.1], vec![0.05, 0.02], vec![0.6, 0.5]];
        let s = matrix(vec![vec![1.0, 0.1], vec![0.1, 1.0]]);
        let c = ReoptConfig {
            epsilon: 0.9,
            top_k_detections: 2,
            post_score_threshold: 0.5,
            ..ReoptConfig::default()
        };
        let out = reoptimize_image(&image(&rows), &s, &c).unwrap();
        let kept: std::collections::BTreeSet<usize> =
            out.deltas.iter().map(|d| d.det_index).collect();
        assert_eq!(kept, [0, 2].into());
        assert!(out
            .detections
            .detections
            .iter()
            .all(|d| d.rank_score(None) >= 0.5));
    }

    #[test]
    fn deltas_csv_round_trip() {
        let d = vec![ScoreDelta {
            image_id: "a,b".into(),
            det_index: 3,
            class: 1,
            before: 0.1,
            after: 0.123_456_789_012_345_67,
        }];
        let mut buf = Vec::new();
        write_deltas_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("image_id,det_index,class,before,after\n"));
        assert_eq!(read_deltas_csv(buf.as_slice()).unwrap(), d);
    }
}
