use ndarray::{s, Array2};

use super::Real;
use crate::error::{Error, Result};

/// A multi-channel image stored pixel-major: row `y * width + x`, one column
/// per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub data: Array2<T>,
}

impl<T: Real> Image<T> {
    pub fn new(height: usize, width: usize, data: Array2<T>) -> Result<Self> {
        if data.nrows() != height * width || data.ncols() == 0 {
            return Err(Error::precondition(format!(
                "image data {:?} does not match {height}x{width}",
                data.dim()
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Single-channel image from row-major values.
    pub fn from_gray(height: usize, width: usize, values: &[f32]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::precondition(format!(
                "expected {} pixels, got {}",
                height * width,
                values.len()
            )));
        }
        let data = Array2::from_shape_fn((height * width, 1), |(p, _)| {
            T::from_f64_lossy(values[p] as f64)
        });
        Ok(Self { height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Activation grid `z`: `channels` values per pixel, stored pixel-major like
/// [`Image`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid<T> {
    pub height: usize,
    pub width: usize,
    pub data: Array2<T>,
}

impl<T: Real> StateGrid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, data: Array2::zeros((height * width, channels)) }
    }

    /// State whose leading channels hold `image` and whose other channels are zero.
    pub fn seeded(image: &Image<T>, channels: usize) -> Result<Self> {
        if image.channels() > channels {
            return Err(Error::config(format!(
                "image has {} channels but state only {channels}",
                image.channels()
            )));
        }
        let mut state = Self::zeros(image.height, image.width, channels);
        state.data.slice_mut(s![.., ..image.channels()]).assign(&image.data);
        Ok(state)
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> T {
        self.data[[y * self.width + x, channel]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Average pooling over `factor`×`factor` blocks.
pub fn downscale<T: Real>(image: &Image<T>, factor: usize) -> Result<Image<T>> {
    if factor == 0 {
        return Err(Error::precondition("downscale factor must be >= 1"));
    }
    if image.height % factor != 0 || image.width % factor != 0 {
        return Err(Error::precondition(format!(
            "image {}x{} is not divisible by factor {factor}",
            image.height, image.width
        )));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height / factor, image.width / factor);
    let channels = image.channels();
    let norm = T::from_usize(factor * factor).unwrap();
    let mut out = Array2::<T>::zeros((h * w, channels));
    for y in 0..image.height {
        for x in 0..image.width {
            let dst = (y / factor) * w + x / factor;
            let src = y * image.width + x;
            for c in 0..channels {
                out[[dst, c]] += image.data[[src, c]];
            }
        }
    }
    out.mapv_inplace(|v| v / norm);
    Ok(Image { height: h, width: w, data: out })
}

/// Nearest-neighbour upscale of the non-input channels of `coarse`; the first
/// `fine_image.channels()` channels are replaced by `fine_image`.
pub fn upscale_and_concat<T: Real>(
    coarse: &StateGrid<T>,
    fine_image: &Image<T>,
    factor: usize,
) -> Result<StateGrid<T>> {
    if coarse.height * factor != fine_image.height || coarse.width * factor != fine_image.width {
        return Err(Error::precondition(format!(
            "coarse {}x{} times {factor} does not match fine {}x{}",
            coarse.height, coarse.width, fine_image.height, fine_image.width
        )));
    }
    let c_in = fine_image.channels();
    let channels = coarse.channels();
    if c_in > channels {
        return Err(Error::config("fine image has more channels than the state"));
    }
    let mut out = StateGrid::zeros(fine_image.height, fine_image.width, channels);
    for y in 0..fine_image.height {
        for x in 0..fine_image.width {
            let dst = y * fine_image.width + x;
            let src = (y / factor) * coarse.width + x / factor;
            for c in 0..c_in {
                out.data[[dst, c]] = fine_image.data[[dst, c]];
            }
            for c in c_in..channels {
                out.data[[dst, c]] = coarse.data[[src, c]];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upscale_and_concat`] with respect to the coarse state: the
/// gradients of replicated pixels are summed and input channels receive none.
pub fn upscale_and_concat_backward<T: Real>(
    grad_fine: &Array2<T>,
    coarse_height: usize,
    coarse_width: usize,
    factor: usize,
    c_in: usize,
) -> Array2<T> {
    let fine_width = coarse_width * factor;
    let channels = grad_fine.ncols();
    let mut out = Array2::<T>::zeros((coarse_height * coarse_width, channels));
    for (p, row) in grad_fine.outer_iter().enumerate() {
        let (y, x) = (p / fine_width, p % fine_width);
        let dst = (y / factor) * coarse_width + x / factor;
        for c in c_in..channels {
            out[[dst, c]] += row[c];
        }
    }
    out
}
