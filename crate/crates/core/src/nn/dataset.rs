use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class index per row.
    Hard(Vec<usize>),
    /// Row-major `n × C` distributions.
    Soft(Vec<f64>),
}

/// Row-major feature matrix plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Labels,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, dim: usize, labels: Labels, num_classes: usize) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::Shape("dim and num_classes must be positive".into()));
        }
        if features.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} feature values do not divide into rows of {dim}",
                features.len()
            )));
        }
        let n = features.len() / dim;
        if n == 0 {
            return Err(Error::Precondition(
                "dataset must have at least one row".into(),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("non-finite feature value".into()));
        }
        match &labels {
            Labels::Hard(y) => {
                if y.len() != n {
                    return Err(Error::Shape(format!("{} labels for {n} rows", y.len())));
                }
                if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
                    return Err(Error::Precondition(format!(
                        "label {bad} outside [0, {num_classes})"
                    )));
                }
            }
            Labels::Soft(y) => {
                if y.len() != n * num_classes {
                    return Err(Error::Shape(format!(
                        "soft labels length {} != {n}×{num_classes}",
                        y.len()
                    )));
                }
                for (i, row) in y.chunks(num_classes).enumerate() {
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-6 {
                        return Err(Error::Precondition(format!(
                            "soft label row {i} is not a distribution (sum {s})"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn hard_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Hard(y) => Some(y),
            Labels::Soft(_) => None,
        }
    }

    /// Labels as a dense `n × C` distribution matrix.
    pub fn label_matrix(&self) -> Vec<f64> {
        match &self.labels {
            Labels::Soft(y) => y.clone(),
            Labels::Hard(y) => {
                let mut m = vec![0.0; y.len() * self.num_classes];
                for (i, &c) in y.iter().enumerate() {
                    m[i * self.num_classes + c] = 1.0;
                }
                m
            }
        }
    }

    /// Class with the highest label mass per row (lowest index on ties).
    pub fn argmax_labels(&self) -> Vec<usize> {
        match &self.labels {
            Labels::Hard(y) => y.clone(),
            Labels::Soft(y) => y
                .chunks(self.num_classes)
                .map(|row| {
                    let mut best = 0;
                    for (c, &p) in row.iter().enumerate() {
                        if p > row[best] {
                            best = c;
                        }
                    }
                    best
                })
                .collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for c in self.argmax_labels() {
            counts[c] += 1;
        }
        counts
    }

    /// New dataset made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        let labels = match &self.labels {
            Labels::Hard(y) => Labels::Hard(rows.iter().map(|&r| y[r]).collect()),
            Labels::Soft(y) => {
                let c = self.num_classes;
                let mut out = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    out.extend_from_slice(&y[r * c..(r + 1) * c]);
                }
                Labels::Soft(out)
            }
        };
        Dataset::new(features, self.dim, labels, self.num_classes)
    }

    /// Overwrites row `dst` with row `src` of `other` (same dim, same label kind).
    pub fn replace_row(&mut self, dst: usize, other: &Dataset, src: usize) -> Result<()> {
        if other.dim != self.dim || other.num_classes != self.num_classes {
            return Err(Error::Shape(
                "replacement pool has a different shape".into(),
            ));
        }
        let d = self.dim;
        self.features[dst * d..(dst + 1) * d].copy_from_slice(other.row(src));
        match (&mut self.labels, &other.labels) {
            (Labels::Hard(a), Labels::Hard(b)) => a[dst] = b[src],
            (Labels::Soft(a), Labels::Soft(b)) => {
                let c = self.num_classes;
                a[dst * c..(dst + 1) * c].copy_from_slice(&b[src * c..(src + 1) * c]);
            }
            _ => return Err(Error::Shape("label kinds differ".into())),
        }
        Ok(())
    }

    /// Concatenates datasets with identical shape and label kind.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut hard = Vec::new();
        let mut soft = Vec::new();
        for p in parts {
            if p.dim != first.dim || p.num_classes != first.num_classes {
                return Err(Error::Shape("concat of differently shaped datasets".into()));
            }
            features.extend_from_slice(&p.features);
            match &p.labels {
                Labels::Hard(y) => hard.extend_from_slice(y),
                Labels::Soft(y) => soft.extend_from_slice(y),
            }
        }
        let labels = match (&first.labels, soft.is_empty()) {
            (Labels::Hard(_), true) => Labels::Hard(hard),
            (Labels::Soft(_), _) if hard.is_empty() => Labels::Soft(soft),
            _ => return Err(Error::Shape("mixed label kinds".into())),
        };
        Dataset::new(features, first.dim, labels, first.num_classes)
    }
}
