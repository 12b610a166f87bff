//! PK identity sampling: `P` distinct identities, `K` images each.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Image indices grouped by dense identity label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdentityIndex {
    by_label: Vec<Vec<usize>>,
}

impl IdentityIndex {
    /// `labels[i]` is the dense label of image `i`; every label below the
    /// maximum must occur.
    pub fn new(labels: &[usize]) -> Result<Self> {
        let n = labels.iter().max().map_or(0, |&m| m + 1);
        let mut by_label = vec![Vec::new(); n];
        for (i, &l) in labels.iter().enumerate() {
            by_label[l].push(i);
        }
        if let Some(l) = by_label.iter().position(Vec::is_empty) {
            return Err(Error::data(format!("identity label {l} has no images")));
        }
        Ok(IdentityIndex { by_label })
    }

    pub fn identities(&self) -> usize {
        self.by_label.len()
    }

    pub fn images(&self, label: usize) -> &[usize] {
        &self.by_label[label]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub image: usize,
    pub label: usize,
}

/// One batch, grouped by identity. Identities with fewer than `k` images
/// contribute all of them plus uniform draws with replacement.
pub fn pk_sample<R: Rng + ?Sized>(
    index: &IdentityIndex,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<BatchItem>> {
    if p == 0 || k == 0 {
        return Err(Error::config(format!(
            "PK sampling needs P, K >= 1, got P={p} K={k}"
        )));
    }
    if index.identities() < p {
        return Err(Error::config(format!(
            "P={p} identities requested but the dataset has {}",
            index.identities()
        )));
    }
    let mut batch = Vec::with_capacity(p * k);
    for label in sample(rng, index.identities(), p).into_iter() {
        let imgs = index.images(label);
        if imgs.len() >= k {
            batch.extend(sample(rng, imgs.len(), k).into_iter().map(|j| BatchItem {
                image: imgs[j],
                label,
            }));
        } else {
            batch.extend(imgs.iter().map(|&image| BatchItem { image, label }));
            for _ in imgs.len()..k {
                batch.push(BatchItem {
                    image: imgs[rng.gen_range(0..imgs.len())],
                    label,
                });
            }
        }
    }
    Ok(batch)
}
