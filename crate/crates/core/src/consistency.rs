//! Dual-space consistency: easy/hard memory banks, the hard × easy rating
//! matrix and nearest-easy-neighbour relabeling of hard samples.

use sfda_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};
use crate::pseudolabel::{PseudoLabels, Space};

/// Samples whose classifier-space and assistant-space labels agree.
#[derive(Debug, Clone, PartialEq)]
pub struct EasyBank<T> {
    /// Unit-norm rows `[m, F]`.
    pub feats: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardBank<T> {
    /// Unit-norm rows `[n′, F]`.
    pub feats: Tensor<T>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    pub easy: EasyBank<T>,
    pub hard: HardBank<T>,
    pub built_at_epoch: usize,
}

impl<T: Real> MemoryBank<T> {
    pub fn len(&self) -> usize {
        self.easy.indices.len() + self.hard.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// No sample was consistent across the two spaces.
    pub fn degraded(&self) -> bool {
        self.easy.indices.is_empty() && !self.hard.indices.is_empty()
    }

    /// Per-sample easy flag in original sample order.
    pub fn easy_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        self.easy.indices.iter().for_each(|&i| mask[i] = true);
        mask
    }

    /// Checks that easy and hard indices are disjoint and cover `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.easy.indices.iter().chain(&self.hard.indices) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(CoreError::Invariant(format!("sample {i} is out of range or in both banks")));
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(CoreError::Invariant(format!("sample {i} is in neither bank"))),
            None => Ok(()),
        }
    }
}

/// Sample `i` is easy iff `labels_c[i] == labels_g[i]`.
pub fn partition<T: Real>(
    labels_c: &PseudoLabels,
    labels_g: &PseudoLabels,
    feats: &Tensor<T>,
    epoch: usize,
) -> Result<MemoryBank<T>> {
    let n = labels_c.labels.len();
    if labels_g.labels.len() != n || feats.shape().first() != Some(&n) || feats.rank() != 2 {
        return Err(CoreError::InvalidInput(format!(
            "partition needs {n} labels in both spaces and [{n}, F] features, got {} labels and {:?}",
            labels_g.labels.len(),
            feats.shape()
        )));
    }
    let (mut easy, mut hard) = (Vec::new(), Vec::new());
    for i in 0..n {
        if labels_c.labels[i] == labels_g.labels[i] {
            easy.push(i);
        } else {
            hard.push(i);
        }
    }
    let unit = feats.l2_normalize_rows();
    let bank = MemoryBank {
        easy: EasyBank {
            feats: unit.select_rows(&easy)?,
            labels: easy.iter().map(|&i| labels_c.labels[i]).collect(),
            indices: easy,
        },
        hard: HardBank {
            feats: unit.select_rows(&hard)?,
            indices: hard,
        },
        built_at_epoch: epoch,
    };
    if bank.degraded() {
        log::warn!("epoch {epoch}: no consistent samples; falling back to classifier labels");
    }
    Ok(bank)
}

/// `S = M_h · M_eᵀ`, shape `[n′, m]`.
pub fn rating_matrix<T: Real>(bank: &MemoryBank<T>) -> Result<Tensor<T>> {
    Ok(bank.hard.feats.matmul(&bank.easy.feats.t()?)?)
}

/// Neighbourhood size actually used for an easy bank of `m` rows.
pub fn effective_k(k: usize, m: usize) -> usize {
    let cap = m.saturating_sub(1).max(1);
    if k > cap {
        log::warn!("k = {k} clamped to {cap} for {m} easy samples");
    }
    k.clamp(1, cap)
}

/// Majority vote over the `k` most similar easy samples of each hard row.
///
/// Neighbours are ranked by similarity, ties to the lower column. A tied vote
/// goes to the class with the larger summed similarity, then the smaller class.
pub fn reassess_hard<T: Real>(s: &Tensor<T>, easy_labels: &[usize], k: usize) -> Result<Vec<usize>> {
    if s.rank() != 2 || s.shape()[1] != easy_labels.len() {
        return Err(CoreError::InvalidInput(format!(
            "rating matrix {:?} does not match {} easy labels",
            s.shape(),
            easy_labels.len()
        )));
    }
    let (rows, m) = (s.shape()[0], s.shape()[1]);
    if m == 0 {
        return Ok(Vec::new());
    }
    let k = effective_k(k, m);
    let classes = easy_labels.iter().max().map_or(0, |&c| c + 1);
    let mut order: Vec<usize> = (0..m).collect();
    let mut votes = vec![0usize; classes];
    let mut mass = vec![T::zero(); classes];
    Ok((0..rows)
        .map(|r| {
            let sim = s.row(r);
            order.sort_by(|&a, &b| sim[b].partial_cmp(&sim[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            votes.iter_mut().for_each(|v| *v = 0);
            mass.iter_mut().for_each(|v| *v = T::zero());
            for &j in &order[..k] {
                votes[easy_labels[j]] += 1;
                mass[easy_labels[j]] = mass[easy_labels[j]] + sim[j];
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Easy samples keep their consistent label, hard samples take `reassessed`.
pub fn final_labels<T: Real>(bank: &MemoryBank<T>, reassessed: &[usize]) -> Result<PseudoLabels> {
    if reassessed.len() != bank.hard.indices.len() {
        return Err(CoreError::Invariant(format!(
            "{} reassessed labels for {} hard samples",
            reassessed.len(),
            bank.hard.indices.len()
        )));
    }
    let n = bank.len();
    let mut out = vec![usize::MAX; n];
    for (&i, &y) in bank.easy.indices.iter().zip(&bank.easy.labels) {
        out[i] = y;
    }
    for (&i, &y) in bank.hard.indices.iter().zip(reassessed) {
        out[i] = y;
    }
    if let Some(i) = out.iter().position(|&y| y == usize::MAX) {
        return Err(CoreError::Invariant(format!("sample {i} has no final label")));
    }
    Ok(PseudoLabels {
        labels: out,
        space: Space::Classifier,
    })
}

/// Banks plus the labels used for the epoch's optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus<T> {
    pub bank: MemoryBank<T>,
    pub labels: Vec<usize>,
    pub degraded: bool,
}

/// Partition, reassess and assemble in one step. When no sample is
/// consistent the classifier-space labels are used for every sample.
pub fn build<T: Real>(
    labels_c: &PseudoLabels,
    labels_g: &PseudoLabels,
    feats: &Tensor<T>,
    k: usize,
    epoch: usize,
) -> Result<Consensus<T>> {
    let bank = partition(labels_c, labels_g, feats, epoch)?;
    bank.check_partition(labels_c.labels.len())?;
    if bank.degraded() {
        return Ok(Consensus {
            bank,
            labels: labels_c.labels.clone(),
            degraded: true,
        });
    }
    let reassessed = if bank.hard.indices.is_empty() {
        Vec::new()
    } else {
        reassess_hard(&rating_matrix(&bank)?, &bank.easy.labels, k)?
    };
    let labels = final_labels(&bank, &reassessed)?.labels;
    Ok(Consensus {
        bank,
        labels,
        degraded: false,
    })
}
