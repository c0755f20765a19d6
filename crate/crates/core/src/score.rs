//! Domain types for pleomorphism scores, rater panels, reference
//! aggregation and quantization.

use crate::error::{Error, Result};

/// Continuous severity value on the [1,3] spectrum. Raw network
/// predictions may spill slightly outside; reported scores are clamped
/// at the boundaries when quantized or rendered.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct PleomorphismScore {
    value: f64,
}

impl PleomorphismScore {
    /// Accepts any finite raw value.
    pub fn raw(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite score {value}")));
        }
        Ok(PleomorphismScore { value })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// Value clamped to the reporting range [1,3].
    pub fn clamped(&self) -> f64 {
        self.value.clamp(1.0, 3.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Confidence {
    NotCertain,
    FairlyCertain,
    Certain,
}

impl Confidence {
    /// Tie-break weight; an absent confidence counts as 2.
    pub fn weight(c: Option<Confidence>) -> u32 {
        match c {
            Some(Confidence::Certain) => 3,
            Some(Confidence::FairlyCertain) | None => 2,
            Some(Confidence::NotCertain) => 1,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Confidence::NotCertain => "not_certain",
            Confidence::FairlyCertain => "fairly_certain",
            Confidence::Certain => "certain",
        }
    }

    pub fn parse(s: &str) -> Result<Option<Confidence>> {
        match s {
            "" => Ok(None),
            "not_certain" => Ok(Some(Confidence::NotCertain)),
            "fairly_certain" => Ok(Some(Confidence::FairlyCertain)),
            "certain" => Ok(Some(Confidence::Certain)),
            other => Err(Error::InvalidInput(format!("unknown confidence {other:?}"))),
        }
    }
}

/// One rater's categorical score for a case.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObserverScore {
    pub rater_id: String,
    pub score: u8,
    pub confidence: Option<Confidence>,
}

impl ObserverScore {
    pub fn new(rater_id: impl Into<String>, score: u8, confidence: Option<Confidence>) -> Result<Self> {
        if !(1..=3).contains(&score) {
            return Err(Error::InvalidInput(format!("score {score} not in {{1,2,3}}")));
        }
        Ok(ObserverScore { rater_id: rater_id.into(), score, confidence })
    }
}

/// One case's scores from a panel of raters.
#[derive(Clone, Debug)]
pub struct RaterPanel {
    pub case_id: String,
    pub scores: Vec<ObserverScore>,
}

impl RaterPanel {
    pub fn new(case_id: impl Into<String>, scores: Vec<ObserverScore>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("empty rater panel".into()));
        }
        for (i, a) in scores.iter().enumerate() {
            for b in &scores[i + 1..] {
                if a.rater_id == b.rater_id {
                    return Err(Error::InvalidInput(format!(
                        "duplicate rater id {:?} in panel",
                        a.rater_id
                    )));
                }
            }
        }
        Ok(RaterPanel { case_id: case_id.into(), scores })
    }
}

/// Arithmetic mean of the panel's integer scores.
pub fn reference_score(panel: &RaterPanel) -> Result<PleomorphismScore> {
    if panel.scores.is_empty() {
        return Err(Error::InvalidInput("empty rater panel".into()));
    }
    let sum: u32 = panel.scores.iter().map(|s| s.score as u32).sum();
    PleomorphismScore::raw(sum as f64 / panel.scores.len() as f64)
}

/// Category with the most votes. Vote-count ties go to the tied
/// category with the larger summed confidence weight (certain=3,
/// fairly_certain=2, not_certain=1, absent=2); remaining ties go to
/// the lower category.
pub fn majority_vote(panel: &RaterPanel) -> Result<u8> {
    if panel.scores.is_empty() {
        return Err(Error::InvalidInput("empty rater panel".into()));
    }
    let mut votes = [0u32; 3];
    let mut conf = [0u32; 3];
    for s in &panel.scores {
        let i = (s.score - 1) as usize;
        votes[i] += 1;
        conf[i] += Confidence::weight(s.confidence);
    }
    let mut best = 0usize;
    for c in 1..3 {
        if votes[c] > votes[best] || (votes[c] == votes[best] && conf[c] > conf[best]) {
            best = c;
        }
    }
    Ok(best as u8 + 1)
}

/// Partition of [1,3] into k ordered categories.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationScheme {
    edges: Vec<f64>,
}

impl QuantizationScheme {
    /// k equal-width bins over [1,3].
    pub fn equal_width(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidConfig(format!("k = {k} < 2")));
        }
        let edges = (0..=k).map(|i| 1.0 + 2.0 * i as f64 / k as f64).collect();
        Ok(QuantizationScheme { edges })
    }

    pub fn from_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 3 {
            return Err(Error::InvalidConfig("need at least 3 edges".into()));
        }
        if edges[0] != 1.0 || *edges.last().unwrap() != 3.0 {
            return Err(Error::InvalidConfig("edges must span [1,3]".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("edges must be strictly increasing".into()));
        }
        Ok(QuantizationScheme { edges })
    }

    pub fn k(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }
}

/// Clamps the score to [1,3] and assigns its bin. Bins are
/// left-closed/right-open except the last, which is closed.
pub fn quantize(score: PleomorphismScore, scheme: &QuantizationScheme) -> u8 {
    let v = score.clamped();
    let k = scheme.k();
    for bin in 0..k - 1 {
        if v < scheme.edges[bin + 1] {
            return bin as u8 + 1;
        }
    }
    k as u8
}

/// Convenience: quantize into k equal-width bins.
pub fn quantize_k(score: PleomorphismScore, k: usize) -> Result<u8> {
    Ok(quantize(score, &QuantizationScheme::equal_width(k)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(scores: &[(u8, Option<Confidence>)]) -> RaterPanel {
        let obs = scores
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| ObserverScore::new(format!("R{i}"), s, c).unwrap())
            .collect();
        RaterPanel::new("case", obs).unwrap()
    }

    fn plain(scores: &[u8]) -> RaterPanel {
        panel(&scores.iter().map(|&s| (s, None)).collect::<Vec<_>>())
    }

    #[test]
    fn reference_score_examples() {
        assert_eq!(reference_score(&plain(&[1, 2, 2, 3])).unwrap().value(), 2.0);
        assert_eq!(reference_score(&plain(&[1; 10])).unwrap().value(), 1.0);
        assert_eq!(reference_score(&plain(&[3])).unwrap().value(), 3.0);
    }

    #[test]
    fn reference_score_permutation_invariant() {
        let a = reference_score(&plain(&[1, 2, 3, 3, 2])).unwrap();
        let b = reference_score(&plain(&[3, 3, 2, 2, 1])).unwrap();
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn empty_panel_rejected() {
        assert!(RaterPanel::new("c", vec![]).is_err());
    }

    #[test]
    fn duplicate_rater_rejected() {
        let obs = vec![
            ObserverScore::new("R0", 1, None).unwrap(),
            ObserverScore::new("R0", 2, None).unwrap(),
        ];
        assert!(RaterPanel::new("c", obs).is_err());
    }

    #[test]
    fn majority_strict_plurality() {
        assert_eq!(majority_vote(&plain(&[1, 1, 2])).unwrap(), 1);
    }

    #[test]
    fn majority_confidence_tiebreak() {
        let p = panel(&[(1, Some(Confidence::Certain)), (2, Some(Confidence::NotCertain))]);
        assert_eq!(majority_vote(&p).unwrap(), 1);
        let p = panel(&[(1, Some(Confidence::NotCertain)), (2, Some(Confidence::Certain))]);
        assert_eq!(majority_vote(&p).unwrap(), 2);
    }

    #[test]
    fn majority_lower_category_fallback() {
        let p = panel(&[(1, None), (3, None)]);
        assert_eq!(majority_vote(&p).unwrap(), 1);
    }

    #[test]
    fn quantize_k3_paper_bins() {
        let q = |v: f64| quantize_k(PleomorphismScore::raw(v).unwrap(), 3).unwrap();
        assert_eq!(q(1.5), 1);
        assert_eq!(q(2.0), 2);
        assert_eq!(q(3.0), 3);
        assert_eq!(q(0.9), 1); // clamp rule
        assert_eq!(q(3.2), 3); // clamp rule
        assert_eq!(q(5.0 / 3.0), 2); // left edge closed
        assert_eq!(q(7.0 / 3.0), 3); // bin 2 right-open
    }

    #[test]
    fn non_finite_rejected() {
        assert!(PleomorphismScore::raw(f64::NAN).is_err());
        assert!(PleomorphismScore::raw(f64::INFINITY).is_err());
    }

    #[test]
    fn quantize_surjective() {
        for k in 2..10 {
            let scheme = QuantizationScheme::equal_width(k).unwrap();
            let mut seen = vec![false; k];
            for i in 0..1000 {
                let v = 1.0 + 2.0 * i as f64 / 999.0;
                let c = quantize(PleomorphismScore::raw(v).unwrap(), &scheme);
                seen[(c - 1) as usize] = true;
            }
            assert!(seen.iter().all(|&b| b), "k={k} not surjective");
        }
    }

    #[test]
    fn unanimous_panel_quantize_matches_majority() {
        for s in 1..=3u8 {
            let p = plain(&[s; 7]);
            let r = reference_score(&p).unwrap();
            assert_eq!(quantize_k(r, 3).unwrap(), majority_vote(&p).unwrap());
        }
    }
}
