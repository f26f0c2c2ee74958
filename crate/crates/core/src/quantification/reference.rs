//! A tiny differentiable model with a single activation map, small enough to
//! differentiate by hand. Used to check gradient capture and quantification
//! against closed forms.

use super::{ActivationModel, ClassGradients, FeatureMaps};
use crate::error::{Error, Result};
use crate::image::Tensor3;

/// One 2x2 valid convolution over channel 0 producing a single map `A`,
/// followed by a two-class head
///
/// ```text
/// z   = sum_ij v_ij * A_ij + c
/// y_k = u_k * tanh(z) + d_k
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct TinyCamModel {
    pub kernel: [[f64; 2]; 2],
    pub conv_bias: f64,
    /// Head weights over the map, row-major, one per activation.
    pub v: Vec<f64>,
    pub c: f64,
    pub u: [f64; 2],
    pub d: [f64; 2],
    /// Input height and width.
    pub input_hw: (usize, usize),
}

impl TinyCamModel {
    pub fn map_shape(&self) -> (usize, usize) {
        (self.input_hw.0 - 1, self.input_hw.1 - 1)
    }

    fn z(&self, maps: &FeatureMaps) -> f64 {
        maps.data().iter().zip(&self.v).map(|(a, v)| a * v).sum::<f64>() + self.c
    }

    fn check_maps(&self, maps: &FeatureMaps) -> Result<()> {
        let (h, w) = self.map_shape();
        if maps.shape() != (1, h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("1x{h}x{w}"),
                found: format!("{:?}", maps.shape()),
            });
        }
        Ok(())
    }
}

impl ActivationModel for TinyCamModel {
    fn capture(&self, input: &Tensor3) -> Result<FeatureMaps> {
        let (h, w) = self.input_hw;
        if input.channels == 0 || (input.height, input.width) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: format!("Cx{h}x{w}"),
                found: format!("{:?}", input.shape()),
            });
        }
        let (mh, mw) = self.map_shape();
        let mut data = Vec::with_capacity(mh * mw);
        for i in 0..mh {
            for j in 0..mw {
                let mut acc = self.conv_bias;
                for (di, row) in self.kernel.iter().enumerate() {
                    for (dj, k) in row.iter().enumerate() {
                        acc += k * input.get(0, i + di, j + dj);
                    }
                }
                data.push(acc);
            }
        }
        FeatureMaps::new(1, mh, mw, data)
    }

    fn scores_from_activations(&self, maps: &FeatureMaps) -> Result<Vec<f64>> {
        self.check_maps(maps)?;
        let t = self.z(maps).tanh();
        Ok(vec![self.u[0] * t + self.d[0], self.u[1] * t + self.d[1]])
    }

    fn score_gradient(&self, maps: &FeatureMaps, class: usize) -> Result<ClassGradients> {
        self.check_maps(maps)?;
        if class > 1 {
            return Err(Error::InvalidConfig(format!("class {class} out of range")));
        }
        let t = self.z(maps).tanh();
        let scale = self.u[class] * (1.0 - t * t);
        let (h, w) = self.map_shape();
        ClassGradients::new(class, 1, h, w, self.v.iter().map(|v| scale * v).collect())
    }
}
