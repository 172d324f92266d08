use crate::error::{contract_err, Result};
use crate::lbp::{lbp_image, resize_bilinear, Image};
use crate::tensor::{Real, Tensor};

/// One preprocessed example: raw-intensity RGB and LBP images, `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Real = f32> {
    pub rgb: Tensor<T>,
    pub lbp: Tensor<T>,
    pub label: usize,
}

/// Resizes to `size×size` and derives the LBP image from the resized RGB.
pub fn preprocess<T: Real>(img: &Image, size: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let rgb = resize_bilinear(&img.to_rgb(), size, size)?;
    let lbp = lbp_image(&rgb)?;
    Ok((rgb.to_tensor(), lbp.to_tensor()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Real = f32> {
    pub samples: Vec<Sample<T>>,
    pub class_names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(samples: Vec<Sample<T>>, class_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(contract_err!("dataset is empty"));
        }
        let shape = samples[0].rgb.shape().to_vec();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(contract_err!("samples must be H×W×3, got {shape:?}"));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label >= class_names.len() {
                return Err(contract_err!("sample {i} has label {} but only {} classes", s.label, class_names.len()));
            }
            if s.rgb.shape() != shape.as_slice() || s.lbp.shape() != shape.as_slice() {
                return Err(contract_err!("sample {i} is not {shape:?}"));
            }
        }
        Ok(Self { samples, class_names })
    }

    /// Preprocesses `(image, label)` pairs on up to `threads` workers. The
    /// output order always matches the input order.
    pub fn from_images(images: &[(Image, usize)], size: usize, class_names: Vec<String>, threads: usize) -> Result<Self> {
        let threads = threads.clamp(1, images.len().max(1));
        let chunk = images.len().div_ceil(threads).max(1);
        let parts: Vec<Result<Vec<Sample<T>>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = images
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|(img, label)| {
                                let (rgb, lbp) = preprocess(img, size)?;
                                Ok(Sample { rgb, lbp, label: *label })
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("preprocessing worker panicked")).collect()
        });
        let mut samples = Vec::with_capacity(images.len());
        for part in parts {
            samples.extend(part?);
        }
        Self::new(samples, class_names)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.samples[0].rgb.shape()[0]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples, self.class_names.clone())
    }

    /// Stacks the selected samples into `[N,H,W,3]` RGB and LBP tensors.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(contract_err!("empty batch"));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.samples[0].rgb.shape());
        let per = self.samples[0].rgb.numel();
        let mut rgb = Vec::with_capacity(per * indices.len());
        let mut lbp = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| contract_err!("sample index {i} out of range"))?;
            rgb.extend_from_slice(s.rgb.data());
            lbp.extend_from_slice(s.lbp.data());
            labels.push(s.label);
        }
        Ok((Tensor::new(shape.clone(), rgb)?, Tensor::new(shape, lbp)?, labels))
    }
}
