//! Linear-chain CRF over tag sequences.
//!
//! A path `y` over `N` positions scores
//! `start[y₀] + Σₜ emit[t][yₜ] + Σₜ trans[yₜ₋₁][yₜ] + stop[y_{N-1}]`.
//! Normalization runs in log space through log-sum-exp; this is required
//! for correctness, since path scores of realistic length overflow `exp`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagging::TagSet;
use crate::tensor::{log_sum_exp, Matrix, Tensors};

/// Entries that are forbidden (scored `-inf`) regardless of their weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMask {
    /// Row-major K×K; `true` = allowed.
    pub transitions: Vec<bool>,
    pub start: Vec<bool>,
}

impl TransitionMask {
    /// Forbids `I-X` after anything but `B-X`/`I-X`, and at the start.
    pub fn iob(tags: &TagSet) -> Self {
        let k = tags.len();
        TransitionMask {
            transitions: (0..k * k)
                .map(|idx| tags.allows_transition(idx / k, idx % k))
                .collect(),
            start: (0..k).map(|j| tags.allows_start(j)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `transitions[i][j]`: score of tag `j` following tag `i`.
    pub transitions: Matrix,
    pub start: Vec<f64>,
    pub stop: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<TransitionMask>,
}

impl CrfParams {
    pub fn zeros(k: usize) -> Self {
        CrfParams {
            transitions: Matrix::zeros(k, k),
            start: vec![0.0; k],
            stop: vec![0.0; k],
            mask: None,
        }
    }

    pub fn init<R: Rng>(k: usize, rng: &mut R) -> Self {
        CrfParams {
            transitions: Matrix::uniform(k, k, 0.1, rng),
            start: (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            stop: (0..k).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: TransitionMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        match &self.mask {
            Some(m) if !m.transitions[from * self.num_tags() + to] => f64::NEG_INFINITY,
            _ => self.transitions.get(from, to),
        }
    }

    pub fn start_score(&self, tag: usize) -> f64 {
        match &self.mask {
            Some(m) if !m.start[tag] => f64::NEG_INFINITY,
            _ => self.start[tag],
        }
    }

    pub fn stop_score(&self, tag: usize) -> f64 {
        self.stop[tag]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_tags();
        if self.transitions.shape() != (k, k) || self.stop.len() != k {
            return Err(Error::shape(format!(
                "CRF with {k} start scores has transitions {:?} and {} stop scores",
                self.transitions.shape(),
                self.stop.len()
            )));
        }
        if let Some(m) = &self.mask {
            if m.transitions.len() != k * k || m.start.len() != k {
                return Err(Error::shape("transition mask does not match tag count"));
            }
        }
        if !self.all_finite() {
            return Err(Error::shape("CRF parameters contain non-finite values"));
        }
        Ok(())
    }

    fn check_emissions(&self, emissions: &[Vec<f64>]) -> Result<()> {
        if emissions.is_empty() {
            return Err(Error::shape("CRF needs at least one position"));
        }
        let k = self.num_tags();
        if let Some((t, row)) = emissions.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(Error::shape(format!(
                "emission row {t} has {} scores, expected {k}",
                row.len()
            )));
        }
        Ok(())
    }

    fn check_tags(&self, tags: &[usize], n: usize) -> Result<()> {
        if tags.len() != n {
            return Err(Error::shape(format!("{} tags for {n} positions", tags.len())));
        }
        if let Some(&bad) = tags.iter().find(|&&t| t >= self.num_tags()) {
            return Err(Error::shape(format!(
                "tag index {bad} out of range for {} tags",
                self.num_tags()
            )));
        }
        Ok(())
    }
}

impl Tensors for CrfParams {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.transitions.as_slice(), &self.start, &self.stop]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.transitions.as_mut_slice(), &mut self.start, &mut self.stop]
    }
}

/// Emission scores for one sequence, with an optional gold path.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfInstance {
    pub emissions: Vec<Vec<f64>>,
    pub gold: Option<Vec<usize>>,
}

impl CrfInstance {
    fn gold(&self) -> Result<&[usize]> {
        self.gold
            .as_deref()
            .ok_or_else(|| Error::Argument("CRF instance has no gold tags".into()))
    }
}

/// `Σ λ² / (2σ²)`; zero when `sigma` is infinite.
pub fn l2_penalty(sq_norm: f64, sigma: f64) -> f64 {
    if sigma.is_infinite() {
        0.0
    } else {
        sq_norm / (2.0 * sigma * sigma)
    }
}

pub fn score_path(params: &CrfParams, emissions: &[Vec<f64>], tags: &[usize]) -> Result<f64> {
    params.check_emissions(emissions)?;
    params.check_tags(tags, emissions.len())?;
    let mut s = params.start_score(tags[0]) + emissions[0][tags[0]];
    for t in 1..tags.len() {
        s += params.transition(tags[t - 1], tags[t]);
        s += emissions[t][tags[t]];
    }
    Ok(s + params.stop_score(tags[tags.len() - 1]))
}

/// Log-space forward table: `alpha[t][j]` covers positions `0..=t` ending in `j`.
fn forward_table(params: &CrfParams, emissions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = params.num_tags();
    let mut alpha = Vec::with_capacity(emissions.len());
    alpha.push((0..k).map(|j| params.start_score(j) + emissions[0][j]).collect::<Vec<_>>());
    for e in &emissions[1..] {
        let prev = alpha.last().expect("non-empty");
        let row = (0..k)
            .map(|j| e[j] + log_sum_exp((0..k).map(|i| prev[i] + params.transition(i, j))))
            .collect();
        alpha.push(row);
    }
    alpha
}

/// `beta[t][i]`: log-sum of scores of positions `t+1..` given tag `i` at `t`,
/// including the stop score.
fn backward_table(params: &CrfParams, emissions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = params.num_tags();
    let n = emissions.len();
    let mut beta = vec![Vec::new(); n];
    beta[n - 1] = (0..k).map(|i| params.stop_score(i)).collect();
    for t in (0..n - 1).rev() {
        let next = &beta[t + 1];
        let e = &emissions[t + 1];
        beta[t] = (0..k)
            .map(|i| log_sum_exp((0..k).map(|j| params.transition(i, j) + e[j] + next[j])))
            .collect();
    }
    beta
}

pub fn log_partition(params: &CrfParams, emissions: &[Vec<f64>]) -> Result<f64> {
    params.check_emissions(emissions)?;
    let alpha = forward_table(params, emissions);
    let last = alpha.last().expect("non-empty");
    Ok(log_sum_exp((0..params.num_tags()).map(|j| last[j] + params.stop_score(j))))
}

/// `score(gold) − log Z − Σλ²/(2σ²)` with λ over the CRF weights.
pub fn log_likelihood(params: &CrfParams, instance: &CrfInstance, l2_sigma: f64) -> Result<f64> {
    let gold = instance.gold()?;
    let s = score_path(params, &instance.emissions, gold)?;
    let z = log_partition(params, &instance.emissions)?;
    Ok(s - z - l2_penalty(params.sq_norm(), l2_sigma))
}

/// Max-scoring path and its score. Among equal scores the lowest tag index
/// wins, both for the final tag and at every backpointer.
pub fn viterbi(params: &CrfParams, emissions: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    params.check_emissions(emissions)?;
    let k = params.num_tags();
    let n = emissions.len();
    let mut best: Vec<f64> = (0..k).map(|j| params.start_score(j) + emissions[0][j]).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(n.saturating_sub(1));
    for e in &emissions[1..] {
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut ptr = vec![0usize; k];
        for j in 0..k {
            let mut arg = 0;
            let mut val = f64::NEG_INFINITY;
            for (i, b) in best.iter().enumerate() {
                let v = b + params.transition(i, j);
                if v > val {
                    val = v;
                    arg = i;
                }
            }
            next[j] = val + e[j];
            ptr[j] = arg;
        }
        best = next;
        back.push(ptr);
    }
    let mut last = 0;
    let mut score = f64::NEG_INFINITY;
    for (j, b) in best.iter().enumerate() {
        let v = b + params.stop_score(j);
        if v > score {
            score = v;
            last = j;
        }
    }
    let mut path = vec![last; n];
    for t in (1..n).rev() {
        path[t - 1] = back[t - 1][path[t]];
    }
    Ok((path, score))
}

/// Posterior tag marginals `p(yₜ = j)`.
pub fn marginals(params: &CrfParams, emissions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    params.check_emissions(emissions)?;
    let alpha = forward_table(params, emissions);
    let beta = backward_table(params, emissions);
    let z = log_partition(params, emissions)?;
    Ok(alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - z).exp()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfGradients {
    /// ∂LL/∂(transitions, start, stop); masked entries are zero.
    pub params: CrfParams,
    /// ∂LL/∂emissions, N×K.
    pub emissions: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

/// Gradient of [`log_likelihood`]: gold feature counts minus expected counts
/// under the model, minus `λ/σ²`.
pub fn crf_gradients(params: &CrfParams, instance: &CrfInstance, l2_sigma: f64) -> Result<CrfGradients> {
    let gold = instance.gold()?;
    let emissions = &instance.emissions;
    params.check_emissions(emissions)?;
    params.check_tags(gold, emissions.len())?;
    let k = params.num_tags();
    let n = emissions.len();

    let alpha = forward_table(params, emissions);
    let beta = backward_table(params, emissions);
    let z = log_sum_exp((0..k).map(|j| alpha[n - 1][j] + params.stop_score(j)));
    let gold_score = score_path(params, emissions, gold)?;
    if !gold_score.is_finite() {
        return Err(Error::Argument(
            "gold path uses a forbidden transition".into(),
        ));
    }

    let mut grad = params.zeroed();
    let mut d_emit = vec![vec![0.0; k]; n];
    for t in 0..n {
        for j in 0..k {
            d_emit[t][j] = -(alpha[t][j] + beta[t][j] - z).exp();
        }
        d_emit[t][gold[t]] += 1.0;
    }
    for j in 0..k {
        grad.start[j] = -(alpha[0][j] + beta[0][j] - z).exp();
        grad.stop[j] = -(alpha[n - 1][j] + params.stop_score(j) - z).exp();
    }
    grad.start[gold[0]] += 1.0;
    grad.stop[gold[n - 1]] += 1.0;
    for t in 0..n - 1 {
        for i in 0..k {
            for j in 0..k {
                let tr = params.transition(i, j);
                if tr == f64::NEG_INFINITY {
                    continue;
                }
                let p = (alpha[t][i] + tr + emissions[t + 1][j] + beta[t + 1][j] - z).exp();
                let cur = grad.transitions.get(i, j);
                grad.transitions.set(i, j, cur - p);
            }
        }
        let cur = grad.transitions.get(gold[t], gold[t + 1]);
        grad.transitions.set(gold[t], gold[t + 1], cur + 1.0);
    }
    if l2_sigma.is_finite() {
        let inv = 1.0 / (l2_sigma * l2_sigma);
        grad.add_scaled(-inv, params);
    }
    Ok(CrfGradients {
        params: grad,
        emissions: d_emit,
        log_likelihood: gold_score - z - l2_penalty(params.sq_norm(), l2_sigma),
    })
}

/// Exhaustive enumeration over all `K^N` paths. Exponential; meant as a
/// reference for small instances.
pub mod brute_force {
    use super::CrfParams;

    /// Every tag sequence of length `n` over `k` tags, in lexicographic order.
    pub fn paths(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |j| {
                        let mut q = p.clone();
                        q.push(j);
                        q
                    })
                })
                .collect();
        }
        out
    }

    pub fn score(params: &CrfParams, emissions: &[Vec<f64>], path: &[usize]) -> f64 {
        let mut s = params.start_score(path[0]) + emissions[0][path[0]];
        for t in 1..path.len() {
            s += params.transition(path[t - 1], path[t]);
            s += emissions[t][path[t]];
        }
        s + params.stop_score(path[path.len() - 1])
    }

    /// `log Σ exp(score)` by direct summation, shifted by the max score.
    pub fn log_partition(params: &CrfParams, emissions: &[Vec<f64>]) -> f64 {
        let scores: Vec<f64> = paths(emissions.len(), params.num_tags())
            .iter()
            .map(|p| score(params, emissions, p))
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
    }

    /// Highest-scoring path, first in lexicographic order among ties.
    pub fn best(params: &CrfParams, emissions: &[Vec<f64>]) -> (Vec<usize>, f64) {
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        for p in paths(emissions.len(), params.num_tags()) {
            let s = score(params, emissions, &p);
            if s > best.1 {
                best = (p, s);
            }
        }
        best
    }

    pub fn probability(params: &CrfParams, emissions: &[Vec<f64>], path: &[usize]) -> f64 {
        (score(params, emissions, path) - log_partition(params, emissions)).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::Scheme;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_instance(r: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> (CrfParams, Vec<Vec<f64>>) {
        let mut p = CrfParams::zeros(k);
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.gen_range(-scale..scale);
            }
        }
        let e = (0..n)
            .map(|_| (0..k).map(|_| r.gen_range(-scale..scale)).collect())
            .collect();
        (p, e)
    }

    #[test]
    fn uniform_partition_values() {
        let z = log_partition(&CrfParams::zeros(2), &[vec![0.0; 2]]).unwrap();
        assert!((z - 2f64.ln()).abs() < 1e-15);
        let z = log_partition(&CrfParams::zeros(3), &[vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!((z - 9f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_tag_likelihood_is_minus_regularizer() {
        let mut p = CrfParams::zeros(1);
        p.start[0] = 0.3;
        p.transitions.set(0, 0, -0.4);
        let inst = CrfInstance {
            emissions: vec![vec![1.5], vec![-2.0], vec![0.1]],
            gold: Some(vec![0, 0, 0]),
        };
        let ll = log_likelihood(&p, &inst, f64::INFINITY).unwrap();
        assert!(ll.abs() < 1e-12);
        let ll = log_likelihood(&p, &inst, 2.0).unwrap();
        let reg = (0.3f64.powi(2) + 0.4f64.powi(2)) / 8.0;
        assert!((ll + reg).abs() < 1e-12);
    }

    #[test]
    fn unregularized_likelihood_is_score_minus_log_z() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (p, e) = random_instance(&mut r, 4, 3, 1.0);
        let gold = vec![0, 2, 1, 1];
        let inst = CrfInstance {
            emissions: e.clone(),
            gold: Some(gold.clone()),
        };
        let expected = score_path(&p, &e, &gold).unwrap() - log_partition(&p, &e).unwrap();
        assert_eq!(log_likelihood(&p, &inst, f64::INFINITY).unwrap(), expected);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let inst = CrfInstance {
            emissions: vec![vec![0.0; 2]],
            gold: None,
        };
        assert!(log_likelihood(&CrfParams::zeros(2), &inst, f64::INFINITY).is_err());
        assert!(crf_gradients(&CrfParams::zeros(2), &inst, f64::INFINITY).is_err());
    }

    #[test]
    fn greedy_path_when_emissions_dominate() {
        let e = vec![vec![5.0, 0.0, 0.0], vec![0.0, 0.0, 5.0], vec![0.0, 5.0, 0.0]];
        let (path, score) = viterbi(&CrfParams::zeros(3), &e).unwrap();
        assert_eq!(path, vec![0, 2, 1]);
        assert_eq!(score, 15.0);
    }

    #[test]
    fn all_zero_viterbi_picks_tag_zero() {
        let (path, score) = viterbi(&CrfParams::zeros(4), &vec![vec![0.0; 4]; 5]).unwrap();
        assert_eq!(path, vec![0; 5]);
        assert_eq!(score, 0.0);
    }

    #[test]
    fn forward_and_viterbi_match_enumeration() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..30 {
            let n = r.gen_range(1..=5);
            let k = r.gen_range(1..=4);
            let (p, e) = random_instance(&mut r, n, k, 2.0);
            let z = log_partition(&p, &e).unwrap();
            assert!((z - brute_force::log_partition(&p, &e)).abs() <= 1e-8);
            let (path, s) = viterbi(&p, &e).unwrap();
            let (_, bs) = brute_force::best(&p, &e);
            assert_eq!(s, bs);
            assert_eq!(score_path(&p, &e, &path).unwrap(), s);
        }
    }

    #[test]
    fn single_tag_has_zero_transition_gradient() {
        let inst = CrfInstance {
            emissions: vec![vec![0.3], vec![1.0]],
            gold: Some(vec![0, 0]),
        };
        let g = crf_gradients(&CrfParams::zeros(1), &inst, f64::INFINITY).unwrap();
        assert_eq!(g.params.transitions.as_slice(), &[0.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (p, e) = random_instance(&mut r, 4, 3, 1.0);
        let gold = vec![1, 1, 0, 2];
        let sigma = 3.0;
        let inst = CrfInstance {
            emissions: e.clone(),
            gold: Some(gold.clone()),
        };
        let g = crf_gradients(&p, &inst, sigma).unwrap();
        let eps = 1e-5;
        let ll = |p: &CrfParams, e: &[Vec<f64>]| {
            log_likelihood(
                p,
                &CrfInstance {
                    emissions: e.to_vec(),
                    gold: Some(gold.clone()),
                },
                sigma,
            )
            .unwrap()
        };
        let analytic: Vec<f64> = g.params.tensors().into_iter().flatten().copied().collect();
        let mut idx = 0;
        for ti in 0..3 {
            let len = p.tensors()[ti].len();
            for k in 0..len {
                let mut plus = p.clone();
                plus.tensors_mut()[ti][k] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti][k] -= eps;
                let num = (ll(&plus, &e) - ll(&minus, &e)) / (2.0 * eps);
                assert!((num - analytic[idx]).abs() < 1e-7, "param {ti}/{k}");
                idx += 1;
            }
        }
        for t in 0..4 {
            for j in 0..3 {
                let mut plus = e.clone();
                plus[t][j] += eps;
                let mut minus = e.clone();
                minus[t][j] -= eps;
                let num = (ll(&p, &plus) - ll(&p, &minus)) / (2.0 * eps);
                assert!((num - g.emissions[t][j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn mask_forbids_invalid_iob() {
        let tags = TagSet::new(Scheme::Polarity);
        let p = CrfParams::zeros(tags.len()).with_mask(TransitionMask::iob(&tags));
        let mut e = vec![vec![0.0; tags.len()]; 3];
        // strongly prefer I-POSITIVE everywhere
        for row in &mut e {
            row[2] = 10.0;
        }
        let (path, _) = viterbi(&p, &e).unwrap();
        assert_eq!(path[0], 1, "must open with B-POSITIVE");
        assert_eq!(&path[1..], &[2, 2]);
        let z = log_partition(&p, &e).unwrap();
        assert!((z - brute_force::log_partition(&p, &e)).abs() < 1e-9);

        let inst = CrfInstance {
            emissions: e,
            gold: Some(vec![1, 2, 0]),
        };
        let g = crf_gradients(&p, &inst, f64::INFINITY).unwrap();
        // O -> I-POSITIVE is forbidden: no gradient flows to it
        assert_eq!(g.params.transitions.get(0, 2), 0.0);
        assert_eq!(g.params.start[2], 0.0);
        let bad = CrfInstance {
            emissions: inst.emissions.clone(),
            gold: Some(vec![0, 2, 0]),
        };
        assert!(crf_gradients(&p, &bad, f64::INFINITY).is_err());
    }

    #[test]
    fn shape_errors() {
        let p = CrfParams::zeros(3);
        assert!(log_partition(&p, &[]).is_err());
        assert!(log_partition(&p, &[vec![0.0; 2]]).is_err());
        assert!(score_path(&p, &[vec![0.0; 3]], &[3]).is_err());
    }
}
