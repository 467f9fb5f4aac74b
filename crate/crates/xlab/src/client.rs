//! [`Oracle`] over the prediction service's HTTP interface.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use xlab_core::extraction::{check_probability_rows, Oracle};
use xlab_core::{Error, Result, Tensor};

use crate::service::{ErrorBody, HealthResponse, PredictRequest, PredictResponse, StatsResponse, CLIENT_HEADER};

const UNKNOWN: usize = usize::MAX;
const NO_LIMIT: usize = usize::MAX - 1;

pub struct RemoteOracle {
    base: String,
    client: Client,
    client_id: String,
    model_name: String,
    num_classes: usize,
    input_shape: [usize; 3],
    /// Samples answered to this client.
    used: AtomicUsize,
    /// Last budget figure the service reported.
    remaining: AtomicUsize,
}

fn transport(e: impl std::fmt::Display) -> Error {
    Error::Transport(e.to_string())
}

fn encode_remaining(r: Option<usize>) -> usize {
    r.map_or(NO_LIMIT, |v| v.min(NO_LIMIT - 1))
}

impl RemoteOracle {
    /// Connects to `base_url` (e.g. `http://127.0.0.1:8080`) and reads the
    /// model's geometry from the health endpoint.
    pub fn connect(base_url: &str) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(transport)?;
        let base = base_url.trim_end_matches('/').to_string();
        let health: HealthResponse = client
            .get(format!("{base}/v1/health"))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(transport)?
            .json()
            .map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if health.status != "ok" || health.num_classes < 2 {
            return Err(Error::MalformedResponse(format!(
                "unhealthy service: status `{}`, {} classes",
                health.status, health.num_classes
            )));
        }
        Ok(Self {
            base,
            client,
            client_id: "xlab".into(),
            model_name: health.model_name,
            num_classes: health.num_classes,
            input_shape: health.input_shape,
            used: AtomicUsize::new(0),
            remaining: AtomicUsize::new(UNKNOWN),
        })
    }

    /// Identifier sent with every request and recorded in the service log.
    pub fn with_client_id(mut self, id: impl Into<String>) -> Self {
        self.client_id = id.into();
        self
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    /// Service-wide counters, across every client.
    pub fn stats(&self) -> Result<StatsResponse> {
        self.client
            .get(format!("{}/v1/stats", self.base))
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(transport)?
            .json()
            .map_err(|e| Error::MalformedResponse(e.to_string()))
    }
}

impl Oracle for RemoteOracle {
    fn id(&self) -> String {
        format!("{}#{}", self.base, self.model_name)
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn query(&self, batch: &Tensor) -> Result<Tensor> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::ShapeMismatch {
                node: "remote oracle input".into(),
                expected: vec![s.first().copied().unwrap_or(0), self.input_shape[0], self.input_shape[1], self.input_shape[2]],
                got: s.to_vec(),
            });
        }
        let n = s[0];
        let body = PredictRequest {
            inputs: (0..n).map(|i| batch.row(i).to_vec()).collect(),
            shape: self.input_shape,
        };
        let resp = self
            .client
            .post(format!("{}/v1/predict", self.base))
            .header(CLIENT_HEADER, &self.client_id)
            .json(&body)
            .send()
            .map_err(transport)?;
        let status = resp.status();
        if !status.is_success() {
            let err: Option<ErrorBody> = resp.json().ok();
            let message = err
                .as_ref()
                .map(|e| e.error.message.clone())
                .unwrap_or_else(|| status.to_string());
            return Err(match status {
                StatusCode::TOO_MANY_REQUESTS => {
                    self.remaining.store(0, Ordering::SeqCst);
                    Error::BudgetExhausted {
                        used: err.and_then(|e| e.queries_used).unwrap_or(0),
                    }
                }
                StatusCode::PAYLOAD_TOO_LARGE => Error::BatchTooLarge {
                    size: n,
                    max: parse_max(&message).unwrap_or(0),
                },
                StatusCode::BAD_REQUEST => Error::InvalidConfig(format!("service rejected the batch: {message}")),
                _ => Error::Transport(format!("{status}: {message}")),
            });
        }
        let answer: PredictResponse = resp.json().map_err(|e| Error::MalformedResponse(e.to_string()))?;
        if answer.probs.len() != n || answer.probs.iter().any(|r| r.len() != self.num_classes) {
            return Err(Error::MalformedResponse(format!(
                "expected {n} rows of {} probabilities",
                self.num_classes
            )));
        }
        let probs = Tensor::new([n, self.num_classes], answer.probs.concat())?;
        check_probability_rows(&probs).map_err(|e| Error::MalformedResponse(e.to_string()))?;
        self.used.fetch_add(n, Ordering::SeqCst);
        self.remaining
            .store(encode_remaining(answer.budget_remaining), Ordering::SeqCst);
        Ok(probs)
    }

    fn queries_used(&self) -> usize {
        self.used.load(Ordering::SeqCst)
    }

    fn budget_remaining(&self) -> Option<usize> {
        match self.remaining.load(Ordering::SeqCst) {
            UNKNOWN => self.stats().ok().and_then(|s| s.budget_remaining),
            NO_LIMIT => None,
            r => Some(r),
        }
    }
}

/// Pulls the limit out of "batch of N exceeds the limit of M".
fn parse_max(message: &str) -> Option<usize> {
    message.rsplit(' ').next()?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limit_is_read_from_the_refusal() {
        assert_eq!(parse_max("batch of 70 exceeds the limit of 64"), Some(64));
        assert_eq!(parse_max("nonsense"), None);
    }

    #[test]
    fn remaining_encoding() {
        assert_eq!(encode_remaining(None), NO_LIMIT);
        assert_eq!(encode_remaining(Some(5)), 5);
        assert_ne!(encode_remaining(Some(usize::MAX)), UNKNOWN);
    }
}
