//! Feature extractors for the perceptual loss term.
//!
//! The default extractor is a fixed-seed random three-stage conv pyramid
//! (3 -> 16 -> 32 -> 64 channels, stride 2 between stages) with a fixed leaky
//! rectifier. It is non-learnable and deterministic for a given seed; random
//! features are an accepted desk-scale proxy for pretrained perceptual
//! features, and the trait lets a pretrained extractor be slotted in later.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Produces feature maps of an `[N,3,H,W]` image on a tape.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn id(&self) -> String;

    /// Feature maps, coarse to fine order is up to the extractor. Must be
    /// deterministic.
    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>>;
}

/// Identity features: the image itself. Turns the perceptual term into plain
/// MSE; useful for hand-checkable tests.
pub struct IdentityExtractor;

impl<T: Scalar> FeatureExtractor<T> for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }

    fn features(&self, _tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }
}

const STAGE_WIDTHS: [usize; 4] = [3, 16, 32, 64];
const LEAKY_SLOPE: f64 = 0.2;

/// Fixed random conv pyramid.
pub struct RandomConvPyramid<T: Scalar> {
    stages: Vec<(Tensor<T>, Tensor<T>)>,
    slope: Tensor<T>,
    seed: u64,
}

impl<T: Scalar> RandomConvPyramid<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        for win in STAGE_WIDTHS.windows(2) {
            let (cin, cout) = (win[0], win[1]);
            let fan_in = cin * 9;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
            let data: Vec<T> = (0..cout * cin * 9).map(|_| T::of(normal.sample(&mut rng))).collect();
            let w = Tensor::new(vec![cout, cin, 3, 3], data).expect("conv shape");
            let b = Tensor::zeros(&[cout]);
            stages.push((w, b));
        }
        RandomConvPyramid {
            stages,
            slope: Tensor::new(vec![1], vec![T::of(LEAKY_SLOPE)]).expect("slope shape"),
            seed,
        }
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandomConvPyramid<T> {
    fn id(&self) -> String {
        format!("random-conv-pyramid(seed={})", self.seed)
    }

    fn features(&self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let (_, c, _, _) = tape.value(image).dims4("perceptual")?;
        if c != 3 {
            return Err(Error::invalid("perceptual", format!("extractor expects 3 channels, got {c}")));
        }
        let slope = tape.constant(self.slope.clone());
        let mut cur = image;
        let mut features = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            cur = tape.conv2d(cur, wv, bv, ConvSpec::same(3, 1).with_stride(2))?;
            cur = tape.prelu(cur, slope)?;
            features.push(cur);
        }
        Ok(features)
    }
}
