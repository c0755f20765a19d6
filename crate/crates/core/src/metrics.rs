//! Regression metrics, quadratic-weighted Cohen's kappa, pairwise
//! agreement matrices, and leave-one-out majority comparison.

use crate::error::{Error, Result};
use crate::score::{majority_vote, ObserverScore, RaterPanel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionReport {
    pub mae: f64,
    pub mse: f64,
    pub mdae: f64,
    pub explained_variance: f64,
    pub r2: f64,
}

/// MAE, MSE, MdAE (even-length median = midpoint average), explained
/// variance and R².
pub fn regression_report(predictions: &[f64], targets: &[f64]) -> Result<RegressionReport> {
    if predictions.len() != targets.len() {
        return Err(Error::InvalidInput(format!(
            "regression_report: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidInput("regression_report on empty inputs".into()));
    }
    let n = predictions.len() as f64;
    let errors: Vec<f64> = predictions.iter().zip(targets).map(|(p, t)| p - t).collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / n;
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mdae = if abs.len() % 2 == 1 {
        abs[abs.len() / 2]
    } else {
        (abs[abs.len() / 2 - 1] + abs[abs.len() / 2]) / 2.0
    };
    let t_mean = targets.iter().sum::<f64>() / n;
    let t_var = targets.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>() / n;
    if t_var == 0.0 {
        return Err(Error::UndefinedMetric("constant targets: EV and R2 undefined".into()));
    }
    let e_mean = errors.iter().sum::<f64>() / n;
    let e_var = errors.iter().map(|e| (e - e_mean).powi(2)).sum::<f64>() / n;
    let explained_variance = 1.0 - e_var / t_var;
    let r2 = 1.0 - errors.iter().map(|e| e * e).sum::<f64>() / targets.iter().map(|t| (t - t_mean).powi(2)).sum::<f64>();
    Ok(RegressionReport { mae, mse, mdae, explained_variance, r2 })
}

/// k x k co-occurrence counts; rows are rater A's categories, columns
/// rater B's. Categories are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_pairs(a: &[u8], b: &[u8], k: usize) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::InvalidInput("confusion matrix wants equal non-empty labelings".into()));
        }
        let mut counts = vec![0u64; k * k];
        for (&x, &y) in a.iter().zip(b) {
            if !(1..=k as u8).contains(&x) || !(1..=k as u8).contains(&y) {
                return Err(Error::InvalidInput(format!("category out of range 1..{k}: ({x},{y})")));
            }
            counts[(x as usize - 1) * k + (y as usize - 1)] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Quadratic-weighted Cohen's kappa: disagreement weights
/// w_ij = (i-j)^2/(k-1)^2, expectation from marginal products,
/// kappa = 1 - sum(w*O)/sum(w*E). Two constant, equal raters score 1
/// by convention; a zero weighted expectation with any disagreement is
/// an undefined-metric error.
pub fn quadratic_kappa(a: &[u8], b: &[u8], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidInput(format!("kappa needs k >= 2, got {k}")));
    }
    let cm = ConfusionMatrix::from_pairs(a, b, k)?;
    let n = cm.total() as f64;
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for i in 0..k {
        for j in 0..k {
            let c = cm.counts[i * k + j] as f64;
            row[i] += c;
            col[j] += c;
        }
    }
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let mut wo = 0.0;
    let mut we = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            wo += w * cm.counts[i * k + j] as f64;
            we += w * row[i] * col[j] / n;
        }
    }
    if we == 0.0 {
        if wo == 0.0 {
            // both raters constant and equal
            return Ok(1.0);
        }
        return Err(Error::UndefinedMetric("zero chance disagreement with observed disagreement".into()));
    }
    Ok(1.0 - wo / we)
}

/// Symmetric matrix of pairwise kappas over participants, with the
/// per-participant mean over the others. Diagonal is 1 by convention.
#[derive(Clone, Debug)]
pub struct KappaMatrix {
    pub participants: Vec<String>,
    pub kappas: Vec<f64>,
    pub mean_excluding_self: Vec<f64>,
}

impl KappaMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.kappas[i * self.participants.len() + j]
    }
}

/// Complete cases x participants category table.
#[derive(Clone, Debug)]
pub struct PanelTable {
    pub participants: Vec<String>,
    pub case_ids: Vec<String>,
    /// Row-major: categories[case][participant].
    pub categories: Vec<u8>,
}

impl PanelTable {
    pub fn new(participants: Vec<String>, case_ids: Vec<String>, categories: Vec<u8>) -> Result<Self> {
        if categories.len() != participants.len() * case_ids.len() {
            return Err(Error::InvalidInput("panel table entries missing".into()));
        }
        if participants.len() < 2 {
            return Err(Error::InvalidInput("panel table needs >= 2 participants".into()));
        }
        Ok(PanelTable { participants, case_ids, categories })
    }

    pub fn column(&self, p: usize) -> Vec<u8> {
        self.case_ids
            .iter()
            .enumerate()
            .map(|(c, _)| self.categories[c * self.participants.len() + p])
            .collect()
    }
}

pub fn pairwise_kappa_matrix(table: &PanelTable, k: usize) -> Result<KappaMatrix> {
    let np = table.participants.len();
    let mut kappas = vec![1.0; np * np];
    for i in 0..np {
        for j in i + 1..np {
            let kij = quadratic_kappa(&table.column(i), &table.column(j), k)?;
            kappas[i * np + j] = kij;
            kappas[j * np + i] = kij;
        }
    }
    let mean_excluding_self = (0..np)
        .map(|i| {
            let s: f64 = (0..np).filter(|&j| j != i).map(|j| kappas[i * np + j]).sum();
            s / (np - 1) as f64
        })
        .collect();
    Ok(KappaMatrix { participants: table.participants.clone(), kappas, mean_excluding_self })
}

/// Per case, the majority vote over all participants except the given
/// one, then the quadratic kappa of the participant against those
/// majorities.
pub fn leave_one_out_majority_kappa(table: &PanelTable, participant: usize, k: usize) -> Result<f64> {
    let np = table.participants.len();
    if np < 3 {
        return Err(Error::InvalidInput("leave-one-out majority needs >= 3 participants".into()));
    }
    if participant >= np {
        return Err(Error::InvalidInput(format!("participant index {participant} out of range")));
    }
    let mut majorities = Vec::with_capacity(table.case_ids.len());
    for (c, case_id) in table.case_ids.iter().enumerate() {
        let scores: Vec<ObserverScore> = (0..np)
            .filter(|&p| p != participant)
            .map(|p| ObserverScore::new(table.participants[p].clone(), table.categories[c * np + p], None))
            .collect::<Result<_>>()?;
        let panel = RaterPanel::new(case_id.clone(), scores)?;
        majorities.push(majority_vote(&panel)?);
    }
    quadratic_kappa(&table.column(participant), &majorities, k)
}

/// Histogram of a_i - b_i over {-2,-1,0,+1,+2} for k=3 categories.
pub fn score_difference_counts(a: &[u8], b: &[u8]) -> Result<[u64; 5]> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput("score_difference_counts length mismatch".into()));
    }
    let mut hist = [0u64; 5];
    for (&x, &y) in a.iter().zip(b) {
        if !(1..=3).contains(&x) || !(1..=3).contains(&y) {
            return Err(Error::InvalidInput(format!("category out of range 1..3: ({x},{y})")));
        }
        hist[(x as i32 - y as i32 + 2) as usize] += 1;
    }
    Ok(hist)
}

/// Tie-aware Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("spearman wants equal vectors of length >= 2".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("constant input to correlation".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_perfect_fit() {
        let t = [1.0, 2.0, 3.0];
        let r = regression_report(&t, &t).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.mdae, 0.0);
        assert_eq!(r.explained_variance, 1.0);
        assert_eq!(r.r2, 1.0);
    }

    #[test]
    fn report_constant_shift_separates_ev_from_r2() {
        let t = [1.0, 2.0, 3.0, 2.5];
        let p: Vec<f64> = t.iter().map(|v| v + 0.5).collect();
        let r = regression_report(&p, &t).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-12);
        assert!((r.mse - 0.25).abs() < 1e-12);
        assert!((r.explained_variance - 1.0).abs() < 1e-12);
        assert!(r.r2 < 1.0);
    }

    #[test]
    fn report_two_point_arithmetic() {
        let r = regression_report(&[1.0, 2.0], &[2.0, 3.0]).unwrap();
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.mse, 1.0);
        assert_eq!(r.mdae, 1.0);
    }

    #[test]
    fn report_errors() {
        assert!(regression_report(&[1.0], &[1.0, 2.0]).is_err());
        assert!(matches!(
            regression_report(&[1.0, 2.0], &[2.0, 2.0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn kappa_perfect_agreement() {
        let a = [1u8, 2, 3, 1, 2];
        assert_eq!(quadratic_kappa(&a, &a, 3).unwrap(), 1.0);
    }

    #[test]
    fn kappa_symmetric() {
        let a = [1u8, 1, 2, 2, 3, 3, 1, 2];
        let b = [1u8, 2, 1, 3, 2, 3, 3, 2];
        assert_eq!(quadratic_kappa(&a, &b, 3).unwrap(), quadratic_kappa(&b, &a, 3).unwrap());
    }

    #[test]
    fn kappa_reversal_invariant() {
        let a = [1u8, 1, 2, 2, 3, 3, 1, 2];
        let b = [1u8, 2, 1, 3, 2, 3, 3, 2];
        let rev = |v: &[u8]| v.iter().map(|&x| 4 - x).collect::<Vec<_>>();
        let k1 = quadratic_kappa(&a, &b, 3).unwrap();
        let k2 = quadratic_kappa(&rev(&a), &rev(&b), 3).unwrap();
        assert!((k1 - k2).abs() < 1e-12);
    }

    #[test]
    fn kappa_constant_equal_is_one() {
        assert_eq!(quadratic_kappa(&[2u8, 2, 2], &[2u8, 2, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn kappa_k2_matches_unweighted_formula() {
        // with k=2 the quadratic weights reduce to 0/1, so kappa equals
        // (p_o - p_e)/(1 - p_e)
        let a = [1u8, 1, 2, 2, 1, 2, 1, 1, 2, 1];
        let b = [1u8, 2, 2, 2, 1, 1, 1, 2, 2, 1];
        let n = a.len() as f64;
        let po = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / n;
        let pa1 = a.iter().filter(|&&x| x == 1).count() as f64 / n;
        let pb1 = b.iter().filter(|&&x| x == 1).count() as f64 / n;
        let pe = pa1 * pb1 + (1.0 - pa1) * (1.0 - pb1);
        let plain = (po - pe) / (1.0 - pe);
        let quad = quadratic_kappa(&a, &b, 2).unwrap();
        assert!((plain - quad).abs() < 1e-12);
    }

    #[test]
    fn kappa_out_of_range_rejected() {
        assert!(quadratic_kappa(&[1u8, 4], &[1u8, 1], 3).is_err());
    }

    #[test]
    fn pairwise_matrix_identical_participants() {
        let table = PanelTable::new(
            vec!["a".into(), "b".into()],
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec![1, 1, 2, 2, 3, 3],
        )
        .unwrap();
        let m = pairwise_kappa_matrix(&table, 3).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.mean_excluding_self, vec![1.0, 1.0]);
    }

    #[test]
    fn loo_majority_unanimous_table() {
        let table = PanelTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec![1, 1, 1, 2, 2, 2, 3, 3, 3],
        )
        .unwrap();
        for p in 0..3 {
            assert_eq!(leave_one_out_majority_kappa(&table, p, 3).unwrap(), 1.0);
        }
    }

    #[test]
    fn loo_needs_three_participants() {
        let table = PanelTable::new(
            vec!["a".into(), "b".into()],
            vec!["c1".into()],
            vec![1, 2],
        )
        .unwrap();
        assert!(leave_one_out_majority_kappa(&table, 0, 3).is_err());
    }

    #[test]
    fn difference_histogram() {
        assert_eq!(score_difference_counts(&[1, 2, 3], &[1, 2, 3]).unwrap(), [0, 0, 3, 0, 0]);
        assert_eq!(score_difference_counts(&[3, 3], &[1, 1]).unwrap(), [0, 0, 0, 0, 2]);
        assert_eq!(score_difference_counts(&[1, 2, 3], &[2, 2, 2]).unwrap(), [0, 1, 1, 1, 0]);
    }

    #[test]
    fn spearman_ties_and_monotone() {
        let a = [1.0, 2.0, 2.0, 3.0];
        let b = [10.0, 20.0, 20.0, 30.0];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = [30.0, 20.0, 20.0, 10.0];
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }
}
