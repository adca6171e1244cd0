//! Two-alternative forced choice scoring.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// A reference, two distortions, and the fraction of observers who judged
/// `p1` closer to the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoAfcTriplet {
    pub reference: ImageTensor,
    pub p0: ImageTensor,
    pub p1: ImageTensor,
    pub h: f64,
}

impl TwoAfcTriplet {
    pub fn new(reference: ImageTensor, p0: ImageTensor, p1: ImageTensor, h: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::Domain(format!("judgment {h} is outside [0, 1]")));
        }
        reference.ensure_same_dims(&p0)?;
        reference.ensure_same_dims(&p1)?;
        Ok(Self { reference, p0, p1, h })
    }
}

/// A triplet whose images are still on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub reference: PathBuf,
    pub p0: PathBuf,
    pub p1: PathBuf,
    pub h: f64,
}

impl TripletRecord {
    pub fn load(&self) -> Result<TwoAfcTriplet> {
        TwoAfcTriplet::new(
            ImageTensor::load_png(&self.reference)?,
            ImageTensor::load_png(&self.p0)?,
            ImageTensor::load_png(&self.p1)?,
            self.h,
        )
    }
}

/// Agreement with observers for one judgment.
pub fn credit(d0: f64, d1: f64, h: f64) -> f64 {
    if d1 < d0 {
        h
    } else if d0 < d1 {
        1.0 - h
    } else {
        0.5
    }
}

/// Mean credit over `(d0, d1, h)` judgments, in percent.
pub fn score_distances(judgments: &[(f64, f64, f64)]) -> Result<f64> {
    if judgments.is_empty() {
        return Err(Error::Precondition("no triplets to score".into()));
    }
    let sum: f64 = judgments.iter().map(|&(d0, d1, h)| credit(d0, d1, h)).sum();
    Ok(100.0 * sum / judgments.len() as f64)
}

/// Score a distance function against observer judgments, in percent.
pub fn two_afc_score(
    triplets: &[TwoAfcTriplet],
    mut metric: impl FnMut(&ImageTensor, &ImageTensor) -> Result<f64>,
) -> Result<f64> {
    let mut judgments = Vec::with_capacity(triplets.len());
    for t in triplets {
        judgments.push((metric(&t.reference, &t.p0)?, metric(&t.reference, &t.p1)?, t.h));
    }
    score_distances(&judgments)
}
