//! Debiasing of validation clicks: clicks are regressed on the control
//! signal over the training split, and the part of each validation click the
//! signal cannot explain serves as proxy relevance.

use crate::clicks::ClickLog;
use crate::data::Dataset;

use super::PipelineError;
use crate::transforms::ControlSignals;

/// Default ridge penalty of the click-on-signal regression.
pub const DEFAULT_DEBIAS_LAMBDA: f64 = 1e-3;

/// Univariate ridge fit `click ≈ intercept + slope · T(ε̂)` with an
/// unpenalised intercept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasModel {
    pub slope: f64,
    pub intercept: f64,
    pub lambda: f64,
    /// True when the training signals were constant and only the mean click
    /// was fitted.
    pub intercept_only: bool,
}

impl DebiasModel {
    pub fn predict(&self, signal: f64) -> f64 {
        self.intercept + self.slope * signal
    }

    /// Fit on every (signal, per-pass click) pair of the training split.
    pub fn fit(
        data: &Dataset,
        signals: &ControlSignals,
        clicks: &ClickLog,
        lambda: f64,
    ) -> Result<Self, PipelineError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(PipelineError::Config(format!(
                "debias lambda must be >= 0, got {lambda}"
            )));
        }
        check_inputs(data, signals, clicks)?;
        // Each document contributes `passes` rows sharing its signal, so the
        // sums below weight documents by the pass count.
        let passes = clicks.passes as f64;
        let mut w = 0.0;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for (s, c) in signals.queries.iter().zip(&clicks.queries) {
            for (&x, bits) in s.values.iter().zip(&c.clicks) {
                w += passes;
                sx += passes * x;
                sy += bits.iter().filter(|&&b| b).count() as f64;
            }
        }
        if w == 0.0 {
            return Err(PipelineError::Config("no training clicks to debias with".into()));
        }
        let (mx, my) = (sx / w, sy / w);
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (s, c) in signals.queries.iter().zip(&clicks.queries) {
            for (&x, bits) in s.values.iter().zip(&c.clicks) {
                let dx = x - mx;
                let clicked = bits.iter().filter(|&&b| b).count() as f64;
                sxx += passes * dx * dx;
                sxy += dx * (clicked - passes * my);
            }
        }
        if sxx == 0.0 {
            return Ok(DebiasModel {
                slope: 0.0,
                intercept: my,
                lambda,
                intercept_only: true,
            });
        }
        let slope = sxy / (sxx + lambda);
        Ok(DebiasModel {
            slope,
            intercept: my - slope * mx,
            lambda,
            intercept_only: false,
        })
    }

    /// Per-document proxy relevance: the mean over passes of
    /// `click − f(T(ε̂))`.
    pub fn proxy(
        &self,
        data: &Dataset,
        signals: &ControlSignals,
        clicks: &ClickLog,
    ) -> Result<ProxyRelevance, PipelineError> {
        check_inputs(data, signals, clicks)?;
        let rates = clicks.click_rates();
        let queries = signals
            .queries
            .iter()
            .zip(rates)
            .map(|(s, r)| {
                s.values
                    .iter()
                    .zip(r)
                    .map(|(&x, rate)| rate - self.predict(x))
                    .collect()
            })
            .collect();
        Ok(ProxyRelevance {
            query_ids: data.queries().iter().map(|q| q.query_id.clone()).collect(),
            values: queries,
        })
    }
}

fn check_inputs(data: &Dataset, signals: &ControlSignals, clicks: &ClickLog) -> Result<(), PipelineError> {
    signals
        .check(data)
        .map_err(|e| PipelineError::Coverage(e.to_string()))?;
    clicks.check(data).map_err(|e| PipelineError::Coverage(e.to_string()))
}

/// Debiased click residuals per validation document.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRelevance {
    pub query_ids: Vec<String>,
    /// `values[query][doc]`, aligned with the validation dataset.
    pub values: Vec<Vec<f64>>,
}

impl ProxyRelevance {
    /// TSV `query_id doc_id proxy`.
    pub fn to_tsv(&self, data: &Dataset) -> String {
        use std::fmt::Write;
        let mut out = String::from("query_id\tdoc_id\tproxy\n");
        for (vals, q) in self.values.iter().zip(data.queries()) {
            for (v, d) in vals.iter().zip(&q.documents) {
                let _ = writeln!(out, "{}\t{}\t{}", q.query_id, d.doc_id, v);
            }
        }
        out
    }
}

/// Fit the debiasing regression on the training split and return it with the
/// proxy relevance of the validation split. Both signal sets must come from
/// the same fitted transform.
pub fn debias_validation_clicks(
    train: (&Dataset, &ControlSignals, &ClickLog),
    valid: (&Dataset, &ControlSignals, &ClickLog),
    lambda: f64,
) -> Result<(DebiasModel, ProxyRelevance), PipelineError> {
    let model = DebiasModel::fit(train.0, train.1, train.2, lambda)?;
    let proxy = model.proxy(valid.0, valid.1, valid.2)?;
    Ok((model, proxy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clicks::QueryClicks;
    use crate::data::{DocId, Document, Query};
    use crate::transforms::QuerySignals;

    fn fixture(values: &[f64], clicks: &[&[bool]]) -> (Dataset, ControlSignals, ClickLog) {
        let docs = values
            .iter()
            .enumerate()
            .map(|(i, _)| Document {
                doc_id: DocId::new(i.to_string()),
                features: vec![0.0],
                relevance: 0,
            })
            .collect();
        let data = Dataset::new(
            vec![Query {
                query_id: "q".into(),
                documents: docs,
            }],
            1,
            4,
        )
        .unwrap();
        let signals = ControlSignals {
            kind: None,
            queries: vec![QuerySignals {
                query_id: "q".into(),
                values: values.to_vec(),
            }],
            floor_hits: 0,
        };
        let log = ClickLog {
            passes: clicks[0].len(),
            queries: vec![QueryClicks {
                query_id: "q".into(),
                positions: (1..=values.len() as u32).collect(),
                clicks: clicks.iter().map(|c| c.to_vec()).collect(),
            }],
        };
        (data, signals, log)
    }

    #[test]
    fn constant_signal_falls_back_to_the_mean() {
        let (d, s, c) = fixture(&[0.5, 0.5, 0.5], &[&[true, true], &[false, true], &[false, false]]);
        let m = DebiasModel::fit(&d, &s, &c, 0.0).unwrap();
        assert!(m.intercept_only);
        assert!((m.intercept - 0.5).abs() < 1e-15);
        let p = m.proxy(&d, &s, &c).unwrap();
        assert_eq!(p.values, vec![vec![0.5, 0.0, -0.5]]);
    }

    #[test]
    fn linear_clicks_leave_no_residual() {
        // Click rate 0, 0.5 and 1 at signals 0, 1 and 2.
        let (d, s, c) = fixture(&[0.0, 1.0, 2.0], &[&[false, false], &[true, false], &[true, true]]);
        let m = DebiasModel::fit(&d, &s, &c, 0.0).unwrap();
        assert!((m.slope - 0.5).abs() < 1e-15);
        assert!(m.intercept.abs() < 1e-15);
        let p = m.proxy(&d, &s, &c).unwrap();
        assert!(p.values[0].iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn training_proxy_is_orthogonal_to_the_signal() {
        let (d, s, c) = fixture(
            &[0.1, 0.7, -0.3, 1.9, 0.4],
            &[
                &[true, false, true],
                &[false, false, true],
                &[true, true, true],
                &[false, false, false],
                &[true, false, false],
            ],
        );
        let m = DebiasModel::fit(&d, &s, &c, 0.0).unwrap();
        let p = m.proxy(&d, &s, &c).unwrap();
        let dot: f64 = p.values[0].iter().zip(&s.queries[0].values).map(|(a, b)| a * b).sum();
        let sum: f64 = p.values[0].iter().sum();
        assert!(dot.abs() < 1e-8, "dot {dot}");
        assert!(sum.abs() < 1e-12);
    }
}
