//! Training losses: the five metric-learning losses plus the baseline
//! cross-entropy, each with exact analytic gradients.
//!
//! Tuple losses (contrastive, triplet, multi-similarity) relate batch
//! embeddings to each other; proxy losses (ArcFace, normalized softmax)
//! relate them to trainable per-class proxy vectors. Contrastive and triplet
//! average over their violating tuples only, and no mining is applied: every
//! in-batch pair/triplet participates.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::Real;
use crate::util::rng_from;

/// Loss selection with per-kind hyperparameters (search-space bounds are
/// advisory: out-of-range values warn, they are not rejected).
#[derive(Clone, Debug, PartialEq)]
pub enum LossConfig {
    Contrastive { pos_margin: f64, neg_margin: f64 },
    TripletMargin { margin: f64 },
    MultiSimilarity { alpha: f64, beta: f64, base: f64 },
    ArcFace { regularizer_weight: f64, margin_degrees: f64, scale: f64 },
    NormalizedSoftmax { temperature: f64 },
    CrossEntropy,
}

impl LossConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            LossConfig::Contrastive { .. } => "contrastive",
            LossConfig::TripletMargin { .. } => "triplet_margin",
            LossConfig::MultiSimilarity { .. } => "multi_similarity",
            LossConfig::ArcFace { .. } => "arcface",
            LossConfig::NormalizedSoftmax { .. } => "normalized_softmax",
            LossConfig::CrossEntropy => "cross_entropy",
        }
    }

    pub fn uses_proxies(&self) -> bool {
        matches!(
            self,
            LossConfig::ArcFace { .. } | LossConfig::NormalizedSoftmax { .. }
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let LossConfig::NormalizedSoftmax { temperature } = self {
            if *temperature <= 0.0 {
                return Err(Error::Config(format!(
                    "normalized softmax temperature must be positive, got {temperature}"
                )));
            }
        }
        Ok(())
    }

    pub fn search_space_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let mut check = |name: &str, v: f64, lo: f64, hi: f64| {
            if !(lo..=hi).contains(&v) {
                w.push(format!("{} {name} {v} outside search space [{lo}, {hi}]", self.kind()));
            }
        };
        match *self {
            LossConfig::Contrastive { pos_margin, neg_margin } => {
                check("pos_margin", pos_margin, 0.0, 0.3);
                check("neg_margin", neg_margin, 0.3, 1.0);
            }
            LossConfig::TripletMargin { margin } => check("margin", margin, 0.01, 0.5),
            LossConfig::MultiSimilarity { alpha, beta, base } => {
                check("alpha", alpha, 0.01, 20.0);
                check("beta", beta, 20.0, 80.0);
                check("base", base, 0.0, 3.0);
            }
            LossConfig::ArcFace { regularizer_weight, margin_degrees, scale } => {
                check("regularizer_weight", regularizer_weight, 1e-6, 0.1);
                check("margin_degrees", margin_degrees, 1.0, 20.0);
                check("scale", scale, 1.0, 500.0);
            }
            LossConfig::NormalizedSoftmax { temperature } => {
                check("temperature", temperature, 1e-5, 0.01);
            }
            LossConfig::CrossEntropy => {}
        }
        w
    }
}

/// Trainable per-class proxy vectors for the angular losses.
#[derive(Clone, Debug)]
pub struct ProxyBank<F> {
    pub proxies: Array2<F>,
    pub classes: Vec<String>,
}

impl<F: Real> ProxyBank<F> {
    /// One proxy per class, initialized like encoder weights:
    /// uniform(-1/sqrt(n), 1/sqrt(n)).
    pub fn init(classes: Vec<String>, dim: usize, seed: u64) -> ProxyBank<F> {
        let mut rng = rng_from(seed, "proxies");
        let bound = 1.0 / (dim as f64).sqrt();
        let proxies = Array2::from_shape_fn((classes.len(), dim), |_| {
            F::from_f64(rng.random_range(-bound..bound))
        });
        ProxyBank { proxies, classes }
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }
}

/// Scalar loss plus gradients. `degenerate` marks batches that offered no
/// usable tuples (the loss is 0 and the step should be skipped).
#[derive(Clone, Debug)]
pub struct LossEval<F> {
    pub loss: F,
    pub grad_embeddings: Array2<F>,
    pub grad_proxies: Option<Array2<F>>,
    pub degenerate: bool,
}

impl<F: Real> LossEval<F> {
    fn zero_like(emb: ArrayView2<F>, degenerate: bool) -> LossEval<F> {
        LossEval {
            loss: F::zero(),
            grad_embeddings: Array2::zeros(emb.dim()),
            grad_proxies: None,
            degenerate,
        }
    }
}

/// Dispatches to the configured loss. Proxy losses require `proxies`.
pub fn evaluate_loss<F: Real>(
    config: &LossConfig,
    outputs: ArrayView2<F>,
    labels: &[usize],
    proxies: Option<ArrayView2<F>>,
) -> Result<LossEval<F>> {
    if outputs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} outputs but {} labels",
            outputs.nrows(),
            labels.len()
        )));
    }
    match *config {
        LossConfig::Contrastive { pos_margin, neg_margin } => {
            Ok(contrastive_loss(outputs, labels, pos_margin, neg_margin))
        }
        LossConfig::TripletMargin { margin } => Ok(triplet_margin_loss(outputs, labels, margin)),
        LossConfig::MultiSimilarity { alpha, beta, base } => {
            Ok(multi_similarity_loss(outputs, labels, alpha, beta, base))
        }
        LossConfig::ArcFace { regularizer_weight, margin_degrees, scale } => {
            let proxies = proxies
                .ok_or_else(|| Error::State("arcface needs a proxy bank".into()))?;
            arcface_loss(outputs, labels, proxies, margin_degrees, scale, regularizer_weight)
        }
        LossConfig::NormalizedSoftmax { temperature } => {
            let proxies = proxies
                .ok_or_else(|| Error::State("normalized softmax needs a proxy bank".into()))?;
            normalized_softmax_loss(outputs, labels, proxies, temperature)
        }
        LossConfig::CrossEntropy => cross_entropy_loss(outputs, labels),
    }
}

fn pair_distance<F: Real>(a: ArrayView2<F>, i: usize, j: usize) -> F {
    let mut d2 = F::zero();
    for c in 0..a.ncols() {
        let diff = a[[i, c]] - a[[j, c]];
        d2 += diff * diff;
    }
    d2.sqrt()
}

/// Mean over violating pairs of max(0, d - pos_margin) for positives and
/// max(0, neg_margin - d) for negatives, with Euclidean d.
pub fn contrastive_loss<F: Real>(
    emb: ArrayView2<F>,
    labels: &[usize],
    pos_margin: f64,
    neg_margin: f64,
) -> LossEval<F> {
    let b = emb.nrows();
    let pos_m = F::from_f64(pos_margin);
    let neg_m = F::from_f64(neg_margin);
    let tiny = F::from_f64(1e-12);
    let mut total = F::zero();
    let mut active = 0usize;
    let mut pairs = 0usize;
    let mut grad = Array2::<F>::zeros(emb.dim());
    for i in 0..b {
        for j in i + 1..b {
            pairs += 1;
            let d = pair_distance(emb, i, j);
            let positive = labels[i] == labels[j];
            let (violation, sign) = if positive {
                (d - pos_m, F::one())
            } else {
                (neg_m - d, -F::one())
            };
            if violation > F::zero() {
                total += violation;
                active += 1;
                if d > tiny {
                    for c in 0..emb.ncols() {
                        let u = (emb[[i, c]] - emb[[j, c]]) / d * sign;
                        grad[[i, c]] += u;
                        grad[[j, c]] -= u;
                    }
                }
            }
        }
    }
    if pairs == 0 {
        return LossEval::zero_like(emb, true);
    }
    if active == 0 {
        return LossEval::zero_like(emb, false);
    }
    let scale = F::from_f64(1.0 / active as f64);
    LossEval {
        loss: total * scale,
        grad_embeddings: grad * scale,
        grad_proxies: None,
        degenerate: false,
    }
}

/// Mean over violating triplets of max(0, d(a,p) - d(a,n) + margin).
pub fn triplet_margin_loss<F: Real>(
    emb: ArrayView2<F>,
    labels: &[usize],
    margin: f64,
) -> LossEval<F> {
    let b = emb.nrows();
    let m = F::from_f64(margin);
    let tiny = F::from_f64(1e-12);
    let mut total = F::zero();
    let mut active = 0usize;
    let mut triplets = 0usize;
    let mut grad = Array2::<F>::zeros(emb.dim());
    for a in 0..b {
        for p in 0..b {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..b {
                if labels[n] == labels[a] {
                    continue;
                }
                triplets += 1;
                let d_ap = pair_distance(emb, a, p);
                let d_an = pair_distance(emb, a, n);
                let v = d_ap - d_an + m;
                if v > F::zero() {
                    total += v;
                    active += 1;
                    if d_ap > tiny {
                        for c in 0..emb.ncols() {
                            let u = (emb[[a, c]] - emb[[p, c]]) / d_ap;
                            grad[[a, c]] += u;
                            grad[[p, c]] -= u;
                        }
                    }
                    if d_an > tiny {
                        for c in 0..emb.ncols() {
                            let u = (emb[[a, c]] - emb[[n, c]]) / d_an;
                            grad[[a, c]] -= u;
                            grad[[n, c]] += u;
                        }
                    }
                }
            }
        }
    }
    if triplets == 0 {
        return LossEval::zero_like(emb, true);
    }
    if active == 0 {
        return LossEval::zero_like(emb, false);
    }
    let scale = F::from_f64(1.0 / active as f64);
    LossEval {
        loss: total * scale,
        grad_embeddings: grad * scale,
        grad_proxies: None,
        degenerate: false,
    }
}

/// log(1 + sum_k exp(a_k)) with max-shifting; also returns the softmax-style
/// weights exp(a_k) / (1 + sum exp(a_j)) used by the gradient.
fn log1p_sum_exp<F: Real>(terms: &[F]) -> (F, Vec<F>) {
    let mut m = F::zero(); // the implicit exp(0) term
    for t in terms {
        m = m.max(*t);
    }
    let mut denom = (-m).exp();
    for t in terms {
        denom += (*t - m).exp();
    }
    let value = m + denom.ln();
    let weights = terms.iter().map(|t| (*t - m).exp() / denom).collect();
    (value, weights)
}

/// Per-anchor soft aggregation of cosine similarities; mean over anchors
/// that have at least one positive and one negative.
pub fn multi_similarity_loss<F: Real>(
    emb: ArrayView2<F>,
    labels: &[usize],
    alpha: f64,
    beta: f64,
    base: f64,
) -> LossEval<F> {
    let b = emb.nrows();
    let dim = emb.ncols();
    let alpha_f = F::from_f64(alpha);
    let beta_f = F::from_f64(beta);
    let base_f = F::from_f64(base);

    // unit-normalized embeddings; similarities are plain dot products of these
    let mut norms = Array1::<F>::zeros(b);
    let mut unit = emb.to_owned();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|v| *v * *v).sum::<F>().sqrt().max(F::from_f64(1e-12));
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    let sims = unit.dot(&unit.t());

    let mut total = F::zero();
    let mut anchors = 0usize;
    let mut grad_sim = Array2::<F>::zeros((b, b));
    for i in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&k| k != i && labels[k] == labels[i]).collect();
        let neg: Vec<usize> = (0..b).filter(|&k| labels[k] != labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        anchors += 1;
        let pos_terms: Vec<F> = pos.iter().map(|&k| -alpha_f * (sims[[i, k]] - base_f)).collect();
        let neg_terms: Vec<F> = neg.iter().map(|&k| beta_f * (sims[[i, k]] - base_f)).collect();
        let (pos_l, pos_w) = log1p_sum_exp(&pos_terms);
        let (neg_l, neg_w) = log1p_sum_exp(&neg_terms);
        total += pos_l / alpha_f + neg_l / beta_f;
        for (idx, &k) in pos.iter().enumerate() {
            grad_sim[[i, k]] -= pos_w[idx];
        }
        for (idx, &k) in neg.iter().enumerate() {
            grad_sim[[i, k]] += neg_w[idx];
        }
    }
    if anchors == 0 {
        return LossEval::zero_like(emb, true);
    }
    let scale = F::from_f64(1.0 / anchors as f64);

    // back through S_ik = u_i . u_k and the normalization
    let mut grad = Array2::<F>::zeros(emb.dim());
    for i in 0..b {
        for k in 0..b {
            let w = grad_sim[[i, k]] * scale;
            if w == F::zero() {
                continue;
            }
            let s = sims[[i, k]];
            for c in 0..dim {
                grad[[i, c]] += w * (unit[[k, c]] - s * unit[[i, c]]) / norms[i];
                grad[[k, c]] += w * (unit[[i, c]] - s * unit[[k, c]]) / norms[k];
            }
        }
    }
    LossEval {
        loss: total * scale,
        grad_embeddings: grad,
        grad_proxies: None,
        degenerate: false,
    }
}

struct NormalizedProxies<F> {
    unit: Array2<F>,
    norms: Array1<F>,
}

fn normalize_proxies<F: Real>(proxies: ArrayView2<F>) -> NormalizedProxies<F> {
    let mut unit = proxies.to_owned();
    let mut norms = Array1::zeros(proxies.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let n = row.iter().map(|v| *v * *v).sum::<F>().sqrt().max(F::from_f64(1e-12));
        norms[i] = n;
        row.mapv_inplace(|v| v / n);
    }
    NormalizedProxies { unit, norms }
}

/// Softmax cross-entropy over one logit row; returns (loss_i, softmax).
fn softmax_ce_row<F: Real>(logits: &[F], label: usize) -> (F, Vec<F>) {
    let mut m = logits[0];
    for l in logits {
        m = m.max(*l);
    }
    let mut denom = F::zero();
    for l in logits {
        denom += (*l - m).exp();
    }
    let lse = m + denom.ln();
    let probs = logits.iter().map(|l| (*l - m).exp() / denom).collect();
    (lse - logits[label], probs)
}

/// Additive angular margin loss: logits are scale * cos(theta_c + m [c==y])
/// against L2-normalized proxies, plus a proxy-norm regularizer. The margin
/// is given in degrees.
pub fn arcface_loss<F: Real>(
    emb: ArrayView2<F>,
    labels: &[usize],
    proxies: ArrayView2<F>,
    margin_degrees: f64,
    scale: f64,
    regularizer_weight: f64,
) -> Result<LossEval<F>> {
    let b = emb.nrows();
    let classes = proxies.nrows();
    check_labels(labels, classes)?;
    let s = F::from_f64(scale);
    let cos_m = F::from_f64(margin_degrees.to_radians().cos());
    let sin_m = F::from_f64(margin_degrees.to_radians().sin());
    let clamp = F::from_f64(1.0 - 1e-7);
    let p = normalize_proxies(proxies);

    let cosines = emb.dot(&p.unit.t()); // (B, C)
    let mut total = F::zero();
    let mut grad_emb = Array2::<F>::zeros(emb.dim());
    let mut grad_unit = Array2::<F>::zeros(p.unit.dim());
    let inv_b = F::from_f64(1.0 / b as f64);
    for i in 0..b {
        let y = labels[i];
        let cos_y_raw = cosines[[i, y]];
        let cos_y = cos_y_raw.max(-clamp).min(clamp);
        let sin_y = (F::one() - cos_y * cos_y).sqrt();
        let mut logits: Vec<F> = (0..classes).map(|c| s * cosines[[i, c]]).collect();
        logits[y] = s * (cos_y * cos_m - sin_y * sin_m);
        let (loss_i, probs) = softmax_ce_row(&logits, y);
        total += loss_i * inv_b;
        for c in 0..classes {
            let mut d_logit = probs[c] * inv_b;
            if c == y {
                d_logit -= inv_b;
            }
            // d logit / d cos
            let d_cos = if c == y {
                if cos_y_raw.abs() >= clamp {
                    F::zero() // clamped: flat
                } else {
                    s * (cos_m + sin_m * cos_y / sin_y)
                }
            } else {
                s
            };
            let w = d_logit * d_cos;
            if w == F::zero() {
                continue;
            }
            for d in 0..emb.ncols() {
                grad_emb[[i, d]] += w * p.unit[[c, d]];
                grad_unit[[c, d]] += w * emb[[i, d]];
            }
        }
    }

    // through proxy normalization, plus the norm regularizer
    let reg_w = F::from_f64(regularizer_weight);
    let inv_c = F::from_f64(1.0 / classes as f64);
    let mut grad_proxies = Array2::<F>::zeros(proxies.dim());
    for c in 0..classes {
        let n = p.norms[c];
        let mut dot = F::zero();
        for d in 0..emb.ncols() {
            dot += grad_unit[[c, d]] * p.unit[[c, d]];
        }
        for d in 0..emb.ncols() {
            grad_proxies[[c, d]] = (grad_unit[[c, d]] - dot * p.unit[[c, d]]) / n;
        }
        let dev = n - F::one();
        total += reg_w * dev * dev * inv_c;
        let two = F::from_f64(2.0);
        for d in 0..emb.ncols() {
            grad_proxies[[c, d]] += reg_w * two * dev * inv_c * p.unit[[c, d]];
        }
    }

    Ok(LossEval {
        loss: total,
        grad_embeddings: grad_emb,
        grad_proxies: Some(grad_proxies),
        degenerate: false,
    })
}

/// Cross-entropy over cosine logits divided by a temperature.
pub fn normalized_softmax_loss<F: Real>(
    emb: ArrayView2<F>,
    labels: &[usize],
    proxies: ArrayView2<F>,
    temperature: f64,
) -> Result<LossEval<F>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let b = emb.nrows();
    let classes = proxies.nrows();
    check_labels(labels, classes)?;
    let inv_t = F::from_f64(1.0 / temperature);
    let p = normalize_proxies(proxies);
    let cosines = emb.dot(&p.unit.t());

    let mut total = F::zero();
    let mut grad_emb = Array2::<F>::zeros(emb.dim());
    let mut grad_unit = Array2::<F>::zeros(p.unit.dim());
    let inv_b = F::from_f64(1.0 / b as f64);
    for i in 0..b {
        let logits: Vec<F> = (0..classes).map(|c| cosines[[i, c]] * inv_t).collect();
        let (loss_i, probs) = softmax_ce_row(&logits, labels[i]);
        total += loss_i * inv_b;
        for c in 0..classes {
            let mut d_logit = probs[c] * inv_b;
            if c == labels[i] {
                d_logit -= inv_b;
            }
            let w = d_logit * inv_t;
            for d in 0..emb.ncols() {
                grad_emb[[i, d]] += w * p.unit[[c, d]];
                grad_unit[[c, d]] += w * emb[[i, d]];
            }
        }
    }
    let mut grad_proxies = Array2::<F>::zeros(proxies.dim());
    for c in 0..classes {
        let n = p.norms[c];
        let mut dot = F::zero();
        for d in 0..emb.ncols() {
            dot += grad_unit[[c, d]] * p.unit[[c, d]];
        }
        for d in 0..emb.ncols() {
            grad_proxies[[c, d]] = (grad_unit[[c, d]] - dot * p.unit[[c, d]]) / n;
        }
    }
    Ok(LossEval {
        loss: total,
        grad_embeddings: grad_emb,
        grad_proxies: Some(grad_proxies),
        degenerate: false,
    })
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy_loss<F: Real>(logits: ArrayView2<F>, labels: &[usize]) -> Result<LossEval<F>> {
    check_labels(labels, logits.ncols())?;
    let b = logits.nrows();
    let inv_b = F::from_f64(1.0 / b as f64);
    let mut total = F::zero();
    let mut grad = Array2::<F>::zeros(logits.dim());
    for i in 0..b {
        let row: Vec<F> = logits.row(i).to_vec();
        let (loss_i, probs) = softmax_ce_row(&row, labels[i]);
        total += loss_i * inv_b;
        for c in 0..logits.ncols() {
            grad[[i, c]] = probs[c] * inv_b;
        }
        grad[[i, labels[i]]] -= inv_b;
    }
    Ok(LossEval {
        loss: total,
        grad_embeddings: grad,
        grad_proxies: None,
        degenerate: false,
    })
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|l| **l >= classes) {
        return Err(Error::Shape(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    if labels.is_empty() {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    Ok(())
}
