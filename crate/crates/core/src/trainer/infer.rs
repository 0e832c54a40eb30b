use std::path::Path;

use crate::collection::{ClassRef, Grid3};
use crate::ndnet::{load_checkpoint, softmax_channels, Checkpoint, Network, OutputMode, Tensor};
use crate::{Error, Result};

/// Window origins along one axis: evenly spread so that consecutive windows
/// are at most `patch * (1 - overlap)` apart and the last one ends at the
/// volume border. A volume smaller than the patch gets one centred window
/// (the outside is edge-replicated).
pub fn sliding_windows(dim: usize, patch: usize, overlap: f64) -> Vec<isize> {
    if patch >= dim {
        return vec![-(((patch - dim) / 2) as isize)];
    }
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let span = dim - patch;
    let n = span.div_ceil(step) + 1;
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as isize)
        .collect()
}

/// Separable Gaussian importance map over a patch, `sigma = patch / 8`,
/// peak 1 at the patch centre. X-fastest.
pub fn gaussian_weights(patch: [usize; 3]) -> Vec<f32> {
    let axis = |p: usize| -> Vec<f64> {
        let c = (p as f64 - 1.0) / 2.0;
        let s = p as f64 / 8.0;
        (0..p)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * s * s)).exp())
            .collect()
    };
    let (wx, wy, wz) = (axis(patch[0]), axis(patch[1]), axis(patch[2]));
    let mut out = Vec::with_capacity(patch.iter().product());
    for z in &wz {
        for y in &wy {
            for x in &wx {
                out.push((x * y * z) as f32);
            }
        }
    }
    out
}

/// Sliding-window inference. Returns one probability volume per output
/// channel: per-class sigmoids, or the softmax over `[background, classes]`.
pub fn predict(net: &Network<f32>, image: &Grid3<f32>, overlap: f64, output: OutputMode) -> Result<Vec<Grid3<f32>>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let patch = net.config.patch_shape;
    let shape = image.shape();
    let channels = net.num_classes();
    let weights = gaussian_weights(patch);
    let p: usize = patch.iter().product();
    let mut acc = vec![0.0f64; channels * image.len()];
    let mut norm = vec![0.0f64; image.len()];
    let origins: Vec<Vec<isize>> = (0..3).map(|a| sliding_windows(shape[a], patch[a], overlap)).collect();
    for &oz in &origins[2] {
        for &oy in &origins[1] {
            for &ox in &origins[0] {
                let origin = [ox, oy, oz];
                let crop = image.crop_replicate(origin, patch).into_vec();
                let input = Tensor::from_vec(&[1, 1, patch[2], patch[1], patch[0]], crop)?;
                let logits = net.forward(&input, None)?;
                let probs: Vec<f32> = match output {
                    OutputMode::Sigmoid => logits.data().iter().map(|&v| sigmoid(v)).collect(),
                    OutputMode::Softmax => softmax_channels(logits.data(), 1, channels, p),
                };
                for pz in 0..patch[2] {
                    let z = oz + pz as isize;
                    if z < 0 || z >= shape[2] as isize {
                        continue;
                    }
                    for py in 0..patch[1] {
                        let y = oy + py as isize;
                        if y < 0 || y >= shape[1] as isize {
                            continue;
                        }
                        for px in 0..patch[0] {
                            let x = ox + px as isize;
                            if x < 0 || x >= shape[0] as isize {
                                continue;
                            }
                            let li = px + patch[0] * (py + patch[1] * pz);
                            let gi = image.index(x as usize, y as usize, z as usize);
                            let w = f64::from(weights[li]);
                            norm[gi] += w;
                            for c in 0..channels {
                                acc[c * image.len() + gi] += w * f64::from(probs[c * p + li]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((0..channels)
        .map(|c| {
            let data = acc[c * image.len()..(c + 1) * image.len()]
                .iter()
                .zip(&norm)
                .map(|(a, n)| (a / n) as f32)
                .collect();
            Grid3::from_vec(shape, data).expect("shape")
        })
        .collect())
}

fn sigmoid(v: f32) -> f32 {
    let v = f64::from(v);
    (if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }) as f32
}

/// Independent per-class thresholding; a probability equal to the threshold
/// counts as positive.
pub fn binarize(probs: &[Grid3<f32>], threshold: f32) -> Vec<Grid3<u8>> {
    probs.iter().map(|g| g.map(|v| u8::from(v >= threshold))).collect()
}

/// Anything that turns an image into one binary mask per class.
pub trait Segmenter {
    fn classes(&self) -> &[ClassRef];
    fn segment(&self, image: &Grid3<f32>) -> Result<Vec<Grid3<u8>>>;
}

/// A trained network with its class list and output convention.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network<f32>,
    pub classes: Vec<ClassRef>,
    pub output: OutputMode,
    pub overlap: f64,
}

impl Model {
    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Model {
            network: ck.network,
            classes: ck.header.classes,
            output: ck.header.output,
            overlap: 0.5,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_checkpoint(load_checkpoint(path)?))
    }

    /// One probability volume per class (background dropped for softmax).
    pub fn probabilities(&self, image: &Grid3<f32>) -> Result<Vec<Grid3<f32>>> {
        let mut probs = predict(&self.network, image, self.overlap, self.output)?;
        if self.output == OutputMode::Softmax {
            probs.remove(0);
        }
        Ok(probs)
    }
}

impl Segmenter for Model {
    fn classes(&self) -> &[ClassRef] {
        &self.classes
    }

    fn segment(&self, image: &Grid3<f32>) -> Result<Vec<Grid3<u8>>> {
        match self.output {
            OutputMode::Sigmoid => Ok(binarize(&self.probabilities(image)?, 0.5)),
            OutputMode::Softmax => {
                let probs = predict(&self.network, image, self.overlap, self.output)?;
                let mut masks = vec![Grid3::<u8>::zeros(image.shape()); probs.len() - 1];
                for i in 0..image.len() {
                    let mut best = 0;
                    for c in 1..probs.len() {
                        if probs[c].data()[i] > probs[best].data()[i] {
                            best = c;
                        }
                    }
                    if best > 0 {
                        masks[best - 1].data_mut()[i] = 1;
                    }
                }
                Ok(masks)
            }
        }
    }
}
