//! Reference classifier for the fine-tuned pathway: logistic regression
//! over hashed unigram counts, trained by full-batch gradient descent.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::features::{featurize, SparseVector, FEATURE_DIM};
use super::{ClassifyError, Label};
use crate::drift::{build_profile, CorpusProfile};
use crate::exec::Exec;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: u32,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 200, learning_rate: 0.5, seed: 0, exec: Exec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub feature_dim: usize,
    #[serde(with = "sparse_weights")]
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Token distribution of the training texts, the reference for drift.
    pub vocab_profile: CorpusProfile,
    pub train_seed: u64,
    pub trained_on_snapshot: String,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub label: Label,
    pub confidence: f64,
}

impl Prediction {
    /// CT on the `>=` side of 0.5.
    pub fn from_score(score: f64) -> Self {
        let label = if score >= 0.5 { Label::Ct } else { Label::NotCt };
        Prediction { score, label, confidence: score.max(1.0 - score) }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelArtifact {
    pub fn zero(trained_on_snapshot: impl Into<String>) -> Self {
        ModelArtifact {
            feature_dim: FEATURE_DIM,
            weights: vec![0.0; FEATURE_DIM],
            bias: 0.0,
            vocab_profile: CorpusProfile::default(),
            train_seed: 0,
            trained_on_snapshot: trained_on_snapshot.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.feature_dim != FEATURE_DIM || self.weights.len() != FEATURE_DIM {
            return Err(ClassifyError::InvalidArtifact(format!(
                "feature_dim {} / {} weights, expected {FEATURE_DIM}",
                self.feature_dim,
                self.weights.len()
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifyError::InvalidArtifact("non-finite weights".into()));
        }
        Ok(())
    }

    fn score_features(&self, x: &SparseVector) -> f64 {
        sigmoid(x.dot(&self.weights) + self.bias)
    }

    pub fn score(&self, text: &str) -> f64 {
        self.score_features(&featurize(text))
    }

    pub fn predict(&self, text: &str) -> Prediction {
        Prediction::from_score(self.score(text))
    }
}

/// Trains from zero-initialized weights. Examples are visited in the given
/// order and the gradient is accumulated sequentially, so equal inputs give
/// bit-identical artifacts in either execution mode. The seed is recorded
/// on the artifact; full-batch descent itself draws no randomness.
pub fn train_reference(
    examples: &[(String, Label)],
    params: &TrainParams,
    snapshot_id: &str,
) -> Result<ModelArtifact, ClassifyError> {
    let has = |l: Label| examples.iter().any(|(_, label)| *label == l);
    if !has(Label::Ct) || !has(Label::NotCt) {
        return Err(ClassifyError::DegenerateDataset);
    }

    let features: Vec<SparseVector> = params.exec.map(examples, |(text, _)| featurize(text));
    let targets: Vec<f64> = examples.iter().map(|(_, l)| if l.is_ct() { 1.0 } else { 0.0 }).collect();
    let mut touched: Vec<u32> = features.iter().flat_map(|x| x.entries().iter().map(|&(i, _)| i)).collect();
    touched.sort_unstable();
    touched.dedup();

    let n = examples.len() as f64;
    let mut model = ModelArtifact::zero(snapshot_id);
    model.train_seed = params.seed;
    let mut grad = vec![0.0f64; FEATURE_DIM];
    let indexed: Vec<usize> = (0..features.len()).collect();

    for _ in 0..params.epochs {
        let residuals: Vec<f64> = params.exec.map(&indexed, |&i| model.score_features(&features[i]) - targets[i]);
        let mut grad_bias = 0.0;
        for (x, r) in features.iter().zip(&residuals) {
            grad_bias += r;
            for &(j, c) in x.entries() {
                grad[j as usize] += r * f64::from(c);
            }
        }
        for &j in &touched {
            let j = j as usize;
            model.weights[j] -= params.learning_rate * grad[j] / n;
            grad[j] = 0.0;
        }
        model.bias -= params.learning_rate * grad_bias / n;
    }

    let texts: Vec<&str> = examples.iter().map(|(t, _)| t.as_str()).collect();
    model.vocab_profile = build_profile(&texts, params.exec);
    model.vocab_profile.built_from = format!("snapshot:{snapshot_id}");
    Ok(model)
}

/// Weights serialize as `{"len": n, "nonzero": [[index, weight], ...]}`;
/// a trained model only touches the buckets seen in training.
mod sparse_weights {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Sparse {
        len: usize,
        nonzero: Vec<(u32, f64)>,
    }

    pub fn serialize<S: Serializer>(weights: &[f64], serializer: S) -> Result<S::Ok, S::Error> {
        let nonzero = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(i, &w)| (i as u32, w))
            .collect();
        Sparse { len: weights.len(), nonzero }.serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Vec<f64>, D::Error> {
        let sparse = Sparse::deserialize(deserializer)?;
        if sparse.len > FEATURE_DIM {
            return Err(serde::de::Error::custom("weight vector longer than the feature space"));
        }
        let mut dense = vec![0.0; sparse.len];
        for (i, w) in sparse.nonzero {
            *dense
                .get_mut(i as usize)
                .ok_or_else(|| serde::de::Error::custom(format!("weight index {i} out of range")))? = w;
        }
        Ok(dense)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Vec<(String, Label)> {
        let mut v = Vec::new();
        for _ in 0..5 {
            v.push(("buy bread".to_string(), Label::NotCt));
            v.push(("secret elite plot".to_string(), Label::Ct));
        }
        v
    }

    #[test]
    fn zero_model_scores_half_and_flags_ct() {
        let m = ModelArtifact::zero("s");
        let p = m.predict("anything at all");
        assert_eq!(p.score, 0.5);
        assert_eq!(p.label, Label::Ct);
        assert_eq!(p.confidence, 0.5);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let m = train_reference(&toy(), &TrainParams::default(), "s").unwrap();
        for (text, label) in toy() {
            assert_eq!(m.predict(&text).label, label, "{text}");
        }
        let p = m.predict("secret elite plot");
        assert_eq!(p.label, Label::Ct);
        assert!(p.confidence > 0.5);
    }

    #[test]
    fn training_is_bit_identical_across_runs_and_modes() {
        let seq = TrainParams { exec: Exec::Sequential, seed: 7, ..Default::default() };
        let par = TrainParams { exec: Exec::Parallel, ..seq };
        let a = train_reference(&toy(), &seq, "s").unwrap();
        let b = train_reference(&toy(), &seq, "s").unwrap();
        let c = train_reference(&toy(), &par, "s").unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert!(a.weights.iter().zip(&c.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn single_class_is_degenerate() {
        let all_ct = vec![("x".to_string(), Label::Ct); 3];
        assert_eq!(train_reference(&all_ct, &TrainParams::default(), "s"), Err(ClassifyError::DegenerateDataset));
        assert_eq!(train_reference(&[], &TrainParams::default(), "s"), Err(ClassifyError::DegenerateDataset));
    }

    #[test]
    fn artifact_round_trips_exactly() {
        let m = train_reference(&toy(), &TrainParams::default(), "s").unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: ModelArtifact = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
        back.validate().unwrap();
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1000.0) >= 0.0);
        assert!(sigmoid(1000.0) <= 1.0);
    }
}
