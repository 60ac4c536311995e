//! Fixed-capacity exemplar memory over past domains, filled by herding.
//!
//! Capacity is split evenly across the domains seen so far (earlier domains
//! take the remainder) and, within a domain, round-robin across classes.
//! Each class keeps its exemplars in herding order, so shrinking a quota is
//! a truncation.

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::generalize::PseudoLabeledDataset;
use crate::nnmodel::{self, ClassifierParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKind {
    True,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain_id: usize,
    pub label_kind: LabelKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainExemplars {
    pub domain_id: usize,
    pub label_kind: LabelKind,
    /// Per class, exemplars in herding order.
    pub per_class: Vec<Vec<Vec<f64>>>,
}

impl DomainExemplars {
    fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    fn truncate_to(&mut self, quota: usize) {
        let available: Vec<usize> = self.per_class.iter().map(Vec::len).collect();
        for (class, keep) in self
            .per_class
            .iter_mut()
            .zip(class_quotas(quota, &available))
        {
            class.truncate(keep);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub k: usize,
    /// One block per seen domain, in stage order.
    pub domains: Vec<DomainExemplars>,
}

/// A completed stage's data as offered to the buffer.
#[derive(Debug, Clone, Copy)]
pub enum NewDomain<'a> {
    Source(&'a Dataset),
    Target(&'a PseudoLabeledDataset),
}

impl ReplayBuffer {
    pub fn new(capacity: usize, k: usize) -> Self {
        Self {
            capacity,
            k,
            domains: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.domains.iter().map(DomainExemplars::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened entries, domain by domain, class by class.
    pub fn entries(&self) -> Vec<BufferEntry> {
        let mut out = Vec::with_capacity(self.len());
        for dom in &self.domains {
            for (label, class) in dom.per_class.iter().enumerate() {
                for f in class {
                    out.push(BufferEntry {
                        features: f.clone(),
                        label,
                        domain_id: dom.domain_id,
                        label_kind: dom.label_kind,
                    });
                }
            }
        }
        out
    }
}

/// `floor(capacity / n)` per domain, the remainder going one each to the
/// earliest domains.
pub fn domain_quotas(capacity: usize, n_domains: usize) -> Vec<usize> {
    if n_domains == 0 {
        return Vec::new();
    }
    let base = capacity / n_domains;
    let extra = capacity % n_domains;
    (0..n_domains)
        .map(|i| base + usize::from(i < extra))
        .collect()
}

/// Round-robin allocation of `total` slots over classes, lowest class first,
/// never exceeding a class's availability.
pub fn class_quotas(total: usize, available: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0; available.len()];
    let mut remaining = total.min(available.iter().sum());
    while remaining > 0 {
        for (a, &cap) in alloc.iter_mut().zip(available) {
            if remaining > 0 && *a < cap {
                *a += 1;
                remaining -= 1;
            }
        }
    }
    alloc
}

/// Greedy herding: repeatedly pick the unchosen row that brings the mean of
/// the chosen rows closest to the mean of all rows. Ties go to the lowest
/// index. Returns indices in pick order.
pub fn herding_select(features: ArrayView2<'_, f64>, m: usize) -> Result<Vec<usize>> {
    let n = features.nrows();
    if m > n {
        return Err(invalid(format!("cannot select {m} of {n} samples")));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let target = features.mean_axis(Axis(0)).expect("nonempty");
    let mut running = Array1::<f64>::zeros(features.ncols());
    let mut chosen = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for step in 0..m {
        let count = (step + 1) as f64;
        let mut best = usize::MAX;
        let mut best_dist = f64::INFINITY;
        for (j, row) in features.rows().into_iter().enumerate() {
            if chosen[j] {
                continue;
            }
            let dist: f64 = target
                .iter()
                .zip(running.iter().zip(row.iter()))
                .map(|(mu, (s, x))| {
                    let diff = mu - (s + x) / count;
                    diff * diff
                })
                .sum();
            if dist < best_dist {
                best_dist = dist;
                best = j;
            }
        }
        chosen[best] = true;
        running += &features.row(best);
        order.push(best);
    }
    Ok(order)
}

/// Adds the just-completed domain and re-trims every older domain to its new
/// quota. Herding runs on the DG model's features.
pub fn update_buffer(
    buffer: &ReplayBuffer,
    new_domain: NewDomain<'_>,
    dg_params: &ClassifierParams,
) -> Result<ReplayBuffer> {
    let (dataset, labels, kind) = match new_domain {
        NewDomain::Source(ds) => (ds, ds.labels()?, LabelKind::True),
        NewDomain::Target(pl) => (&pl.samples, pl.pseudo_labels.clone(), LabelKind::Pseudo),
    };
    let k = buffer.k;
    let mut next = buffer.clone();
    let quotas = domain_quotas(buffer.capacity, buffer.domains.len() + 1);
    for (dom, &q) in next.domains.iter_mut().zip(&quotas) {
        dom.truncate_to(q);
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(invalid(format!("label {l} out of range")));
        }
        by_class[l].push(i);
    }
    let available: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let per_class_quota = class_quotas(*quotas.last().expect("at least one domain"), &available);
    let feats = if per_class_quota.iter().any(|&q| q > 0) {
        Some(nnmodel::features(dg_params, dataset.features())?)
    } else {
        None
    };
    let mut per_class = Vec::with_capacity(k);
    for (members, &quota) in by_class.iter().zip(&per_class_quota) {
        let picks = match (&feats, quota) {
            (Some(f), q) if q > 0 => herding_select(f.select(Axis(0), members).view(), q)?,
            _ => Vec::new(),
        };
        per_class.push(
            picks
                .into_iter()
                .map(|p| dataset.features().row(members[p]).to_vec())
                .collect(),
        );
    }
    next.domains.push(DomainExemplars {
        domain_id: dataset.domain_id(),
        label_kind: kind,
        per_class,
    });
    Ok(next)
}
