use crate::error::{Error, Result};
use crate::od::ODMatrix;

/// Largest log1p flow a decode will produce (about 10^13 persons), so wild
/// samples still decode to finite matrices.
const MAX_LOG_FLOW: f64 = 30.0;

/// Standardized log flows: `z = (log1p(F) − μ) / σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowCodec {
    pub mu: f64,
    pub sigma: f64,
}

impl FlowCodec {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!(
                "codec needs finite mu and sigma > 0, got ({mu}, {sigma})"
            )));
        }
        Ok(FlowCodec { mu, sigma })
    }

    /// Fits on every entry (diagonal included) of the training matrices.
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a ODMatrix>) -> Result<Self> {
        let z: Vec<f64> = matrices
            .into_iter()
            .flat_map(|m| m.flows().iter().map(|f| f.ln_1p()))
            .collect();
        if z.is_empty() {
            return Err(Error::Validation(
                "cannot fit a flow codec on no flows".into(),
            ));
        }
        let n = z.len() as f64;
        let mu = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::Domain(
                "training flows are constant; codec scale undefined".into(),
            ));
        }
        FlowCodec::new(mu, var.sqrt())
    }

    pub fn encode(&self, m: &ODMatrix) -> Vec<f64> {
        m.flows()
            .iter()
            .map(|f| (f.ln_1p() - self.mu) / self.sigma)
            .collect()
    }

    /// Inverse transform, clamped at zero and rounded to whole persons.
    pub fn decode(&self, region_ids: Vec<String>, z: &[f64]) -> Result<ODMatrix> {
        if let Some(v) = z.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cannot decode state value {v}")));
        }
        let flows = z
            .iter()
            .map(|v| {
                (v * self.sigma + self.mu)
                    .min(MAX_LOG_FLOW)
                    .exp_m1()
                    .max(0.0)
                    .round()
            })
            .collect();
        ODMatrix::new(region_ids, flows)
    }
}
