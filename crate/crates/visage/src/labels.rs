//! Expression labels, signed intensity codes, and the uniform latent prior.
//!
//! A label is a one-hot class vector y. The decoder is conditioned not on y
//! itself but on a signed intensity code u = v * (2y - 1) with v drawn from
//! U(0,1) per component: the sign pattern carries the class, the magnitude a
//! continuous intensity, so one trained decoder renders any strength of any
//! expression by sliding the target component across [-1, 1].

use ndarray::Array1;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("class index {index} out of range for {class_count} classes")]
    IndexOutOfRange { index: usize, class_count: usize },
    #[error("intensity component {0} outside (0, 1]")]
    IntensityOutOfRange(f32),
    #[error("intensity vector length {got}, expected {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("need at least 2 classes to sample a different target label")]
    TooFewClasses,
}

/// A categorical expression label among `class_count` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpressionLabel {
    class_index: usize,
    class_count: usize,
}

impl ExpressionLabel {
    pub fn class_index(&self) -> usize {
        self.class_index
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn onehot(&self) -> Array1<f32> {
        let mut y = Array1::zeros(self.class_count);
        y[self.class_index] = 1.0;
        y
    }
}

/// Builds the one-hot label for `class_index` among `class_count` classes.
pub fn one_hot(class_index: usize, class_count: usize) -> Result<ExpressionLabel, LabelError> {
    if class_index >= class_count {
        return Err(LabelError::IndexOutOfRange {
            index: class_index,
            class_count,
        });
    }
    Ok(ExpressionLabel {
        class_index,
        class_count,
    })
}

/// Signed intensity code u = v * (2y - 1): the labelled component is +v_i,
/// every other component -v_j.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityCode {
    pub u: Array1<f32>,
}

pub fn intensity_code(label: &ExpressionLabel, v: &[f32]) -> Result<IntensityCode, LabelError> {
    if v.len() != label.class_count {
        return Err(LabelError::LengthMismatch {
            got: v.len(),
            expected: label.class_count,
        });
    }
    for &vi in v {
        if !(vi > 0.0 && vi <= 1.0) {
            return Err(LabelError::IntensityOutOfRange(vi));
        }
    }
    let y = label.onehot();
    let u = Array1::from_iter(v.iter().zip(y.iter()).map(|(&vi, &yi)| vi * (2.0 * yi - 1.0)));
    Ok(IntensityCode { u })
}

/// How intensity magnitudes v are chosen when building codes.
#[derive(Debug, Clone)]
pub enum IntensityMode {
    /// Each component i.i.d. U(0,1), redrawn per call.
    RandomPerSample,
    /// Caller-fixed magnitudes, e.g. all ones for peak expression.
    Fixed(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct IntensitySampler {
    pub mode: IntensityMode,
}

impl IntensitySampler {
    pub fn random() -> Self {
        Self {
            mode: IntensityMode::RandomPerSample,
        }
    }

    pub fn fixed(v: Vec<f32>) -> Result<Self, LabelError> {
        for &vi in &v {
            if !(vi > 0.0 && vi <= 1.0) {
                return Err(LabelError::IntensityOutOfRange(vi));
            }
        }
        Ok(Self {
            mode: IntensityMode::Fixed(v),
        })
    }

    pub fn sample(&self, label: &ExpressionLabel, rng: &mut impl Rng) -> IntensityCode {
        let v: Vec<f32> = match &self.mode {
            // 1 - U[0,1) lands in (0,1], keeping every v_i strictly positive.
            IntensityMode::RandomPerSample => (0..label.class_count)
                .map(|_| (1.0 - rng.gen::<f64>()) as f32)
                .collect(),
            IntensityMode::Fixed(v) => v.clone(),
        };
        intensity_code(label, &v).expect("sampled magnitudes are in (0, 1]")
    }
}

/// Uniformly samples a class different from `current`.
pub fn sample_target_label(
    current: &ExpressionLabel,
    rng: &mut impl Rng,
) -> Result<ExpressionLabel, LabelError> {
    let k = current.class_count;
    if k < 2 {
        return Err(LabelError::TooFewClasses);
    }
    let draw = rng.gen_range(0..k - 1);
    let class = if draw >= current.class_index {
        draw + 1
    } else {
        draw
    };
    Ok(ExpressionLabel {
        class_index: class,
        class_count: k,
    })
}

/// The encoder's bounded face code; components in (-1,1) from Tanh, or in
/// [-1,1] when drawn from the prior.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceLatent {
    pub g: Array1<f32>,
}

/// Draws an n-dimensional latent with i.i.d. U(-1,1) components.
pub fn sample_prior(n: usize, rng: &mut impl Rng) -> FaceLatent {
    let g = Array1::from_iter((0..n).map(|_| (2.0 * rng.gen::<f64>() - 1.0) as f32));
    FaceLatent { g }
}
