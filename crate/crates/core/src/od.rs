use crate::error::{Error, Result};

/// Which ordered region pairs a computation looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSelection {
    #[default]
    All,
    OffDiagonal,
}

/// N×N commuting flows; `flow(i, j)` is the number of people living in
/// region `i` and working in region `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ODMatrix {
    region_ids: Vec<String>,
    flows: Vec<f64>,
}

impl ODMatrix {
    pub fn new(region_ids: Vec<String>, flows: Vec<f64>) -> Result<Self> {
        let n = region_ids.len();
        if flows.len() != n * n {
            return Err(Error::Shape(format!(
                "{n} regions need {} flows, got {}",
                n * n,
                flows.len()
            )));
        }
        if let Some(v) = flows.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Domain(format!(
                "flows must be finite and non-negative, found {v}"
            )));
        }
        Ok(ODMatrix { region_ids, flows })
    }

    pub fn zeros(region_ids: Vec<String>) -> Self {
        let n = region_ids.len();
        ODMatrix {
            region_ids,
            flows: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn flows(&self) -> &[f64] {
        &self.flows
    }

    pub fn flow(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.n() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Domain(format!(
                "flow must be finite and non-negative, got {v}"
            )));
        }
        let n = self.n();
        self.flows[i * n + j] = v;
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.flows.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.flows
            .chunks(self.n().max(1))
            .map(|r| r.iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|j| (0..n).map(|i| self.flows[i * n + j]).sum())
            .collect()
    }

    /// Flattened flows for the selected pairs, row-major.
    pub fn pairs(&self, sel: PairSelection) -> Vec<f64> {
        let n = self.n();
        match sel {
            PairSelection::All => self.flows.clone(),
            PairSelection::OffDiagonal => (0..n * n)
                .filter(|k| k / n != k % n)
                .map(|k| self.flows[k])
                .collect(),
        }
    }

    /// Reorders regions so that new index `i` holds old region `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ODMatrix {
        let n = self.n();
        let ids = perm.iter().map(|&p| self.region_ids[p].clone()).collect();
        let mut flows = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                flows[i * n + j] = self.flows[perm[i] * n + perm[j]];
            }
        }
        ODMatrix {
            region_ids: ids,
            flows,
        }
    }

    pub fn is_integral(&self) -> bool {
        self.flows.iter().all(|v| v.fract() == 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn rejects_negative_and_bad_shape() {
        assert!(ODMatrix::new(ids(2), vec![0.0, 1.0, -1.0, 0.0]).is_err());
        assert!(ODMatrix::new(ids(2), vec![0.0; 3]).is_err());
        assert!(ODMatrix::new(ids(2), vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn pair_selection_and_sums() {
        let m = ODMatrix::new(ids(2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.pairs(PairSelection::OffDiagonal), vec![2.0, 3.0]);
        assert_eq!(m.row_sums(), vec![3.0, 7.0]);
        assert_eq!(m.col_sums(), vec![4.0, 6.0]);
        let p = m.permuted(&[1, 0]);
        assert_eq!(p.flows(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(p.region_ids(), &["r1".to_string(), "r0".to_string()]);
    }
}
