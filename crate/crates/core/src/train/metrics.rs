use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub node: String,
    pub mae: f64,
    pub mse: f64,
}

/// MAE in m/s and MSE in (m/s)², overall and per target node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub horizon: usize,
    pub samples: usize,
    pub mae: f64,
    pub mse: f64,
    pub per_node: Vec<NodeMetrics>,
}

impl Metrics {
    /// `pred` and `actual` are row-major `[samples, nodes.len()]`.
    pub fn compute(pred: &[f64], actual: &[f64], nodes: &[String], horizon: usize) -> Result<Self, TrainError> {
        let k = nodes.len();
        if k == 0 || pred.len() != actual.len() || !pred.len().is_multiple_of(k) || pred.is_empty() {
            return Err(TrainError::Mismatch(format!(
                "{} predictions vs {} targets over {k} nodes",
                pred.len(),
                actual.len()
            )));
        }
        let samples = pred.len() / k;
        let mut abs = vec![0.0; k];
        let mut sq = vec![0.0; k];
        for (i, (p, a)) in pred.iter().zip(actual).enumerate() {
            let e = p - a;
            abs[i % k] += e.abs();
            sq[i % k] += e * e;
        }
        let n = samples as f64;
        let total = pred.len() as f64;
        Ok(Self {
            horizon,
            samples,
            mae: abs.iter().sum::<f64>() / total,
            mse: sq.iter().sum::<f64>() / total,
            per_node: nodes
                .iter()
                .zip(abs.iter().zip(&sq))
                .map(|(node, (a, s))| NodeMetrics {
                    node: node.clone(),
                    mae: a / n,
                    mse: s / n,
                })
                .collect(),
        })
    }

    /// One `name,horizon,node,mae,mse` line per node plus an `all` line.
    pub fn to_rows(&self, name: &str) -> Vec<String> {
        std::iter::once(format!("{name},{},all,{},{}", self.horizon, self.mae, self.mse))
            .chain(
                self.per_node
                    .iter()
                    .map(|m| format!("{name},{},{},{},{}", self.horizon, m.node, m.mae, m.mse)),
            )
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn hand_examples() {
        let m = Metrics::compute(&[3.0, 4.0], &[3.0, 4.0], &names(2), 6).unwrap();
        assert_eq!((m.mae, m.mse), (0.0, 0.0));
        let m = Metrics::compute(&[1.0, 1.0], &[0.0, 2.0], &names(1), 6).unwrap();
        assert_eq!((m.mae, m.mse), (1.0, 1.0));
        assert_eq!(m.samples, 2);
    }

    #[test]
    fn per_node_breakdown_averages_to_overall() {
        let pred = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let actual = [1.5, 2.0, 1.0, 4.0, 5.0, 9.0];
        let m = Metrics::compute(&pred, &actual, &names(3), 12).unwrap();
        assert_eq!(m.per_node[0].mae, 0.25);
        assert_eq!(m.per_node[2].mse, (4.0 + 9.0) / 2.0);
        let mean_mae = m.per_node.iter().map(|n| n.mae).sum::<f64>() / 3.0;
        assert!((mean_mae - m.mae).abs() < 1e-15);
        assert_eq!(m.to_rows("model").len(), 4);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(Metrics::compute(&[1.0], &[1.0, 2.0], &names(1), 6).is_err());
        assert!(Metrics::compute(&[], &[], &names(1), 6).is_err());
    }
}
