//! Image datasets. Ground truth of target sets lives in sidecar sections that
//! only evaluation reads.

use std::path::Path;

use sfda_tensor::Tensor;

use super::container::{Container, Section};
use crate::error::{CoreError, Result};

pub const IMAGES: &str = "images";
pub const LABELS: &str = "labels";
pub const TRUTH: &str = "sidecar.truth";
pub const HARD: &str = "sidecar.hard";

/// Images `[n, C, H, W]` with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Hidden target annotations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sidecar {
    pub truth: Vec<usize>,
    pub hard: Vec<bool>,
}

fn check_images(images: &Tensor<f32>) -> Result<usize> {
    if images.rank() != 4 {
        return Err(CoreError::InvalidInput(format!("images must be [n, C, H, W], got {:?}", images.shape())));
    }
    Ok(images.shape()[0])
}

/// Labeled set: `images` and `labels`.
pub fn labeled_container(images: &Tensor<f32>, labels: &[usize]) -> Result<Container> {
    if check_images(images)? != labels.len() {
        return Err(CoreError::InvalidInput("one label per image required".into()));
    }
    let mut c = Container::new();
    c.push(Section::tensor(IMAGES, images))?;
    c.push(Section::labels(LABELS, labels))?;
    Ok(c)
}

/// Target set: `images` plus sidecar ground truth and easy/hard tags.
pub fn target_container(images: &Tensor<f32>, sidecar: &Sidecar) -> Result<Container> {
    let n = check_images(images)?;
    if sidecar.truth.len() != n || sidecar.hard.len() != n {
        return Err(CoreError::InvalidInput("sidecar must cover every image".into()));
    }
    let mut c = Container::new();
    c.push(Section::tensor(IMAGES, images))?;
    c.push(Section::labels(TRUTH, &sidecar.truth))?;
    let hard: Vec<usize> = sidecar.hard.iter().map(|&h| h as usize).collect();
    c.push(Section::labels(HARD, &hard))?;
    Ok(c)
}

fn images_of(c: &Container) -> Result<Tensor<f32>> {
    let images = c.require(IMAGES)?.to_tensor()?;
    check_images(&images)?;
    Ok(images)
}

/// Reads images and, when present, the `labels` section. Sidecar sections are
/// never read here, so adaptation cannot see target ground truth.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let c = Container::load(path)?;
    let images = images_of(&c)?;
    let labels = c.get(LABELS).map(|s| s.to_labels()).transpose()?;
    if labels.as_ref().is_some_and(|l| l.len() != images.shape()[0]) {
        return Err(CoreError::InvalidInput("label count differs from image count".into()));
    }
    Ok(Dataset { images, labels })
}

/// Evaluation-only access to a target file's ground truth.
pub fn load_sidecar(path: impl AsRef<Path>) -> Result<Sidecar> {
    let c = Container::load(path)?;
    let truth = c.require(TRUTH)?.to_labels()?;
    let hard: Vec<bool> = c.require(HARD)?.to_labels()?.into_iter().map(|h| h != 0).collect();
    if truth.len() != hard.len() {
        return Err(CoreError::InvalidInput("sidecar sections differ in length".into()));
    }
    Ok(Sidecar { truth, hard })
}

/// Ground truth for evaluation: the `labels` section of a labeled set or the
/// sidecar of a target set.
pub fn load_truth(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let c = Container::load(path)?;
    match (c.get(LABELS), c.get(TRUTH)) {
        (Some(s), _) | (None, Some(s)) => s.to_labels(),
        (None, None) => Err(CoreError::InvalidInput("file carries no ground truth".into())),
    }
}
