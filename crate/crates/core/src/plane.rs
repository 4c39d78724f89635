//! Image planes, matting inputs and their validation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MatteError, Result};
use crate::tensor::{Real, Tensor};

/// Tolerance for a trimap value to count as exactly 0, 0.5 or 1.
pub const TRIMAP_EXACT_TOL: f64 = 1e-6;
/// Ingest snaps values within this distance of a trimap level.
pub const TRIMAP_SNAP_TOL: f64 = 1e-2;

/// Deterministic RNG used everywhere a seed is accepted.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Channel-major (`channels x height x width`) stack of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Plane<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(MatteError::ShapeMismatch(format!(
                "plane {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MatteError::NonFinite(format!("plane value at index {i}")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        assert!(value.is_finite());
        Self { height, width, channels, data: vec![value; channels * height * width] }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Applies `f` to every value, re-checking finiteness.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.channels, self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Real>(&self) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![self.channels, self.height, self.width], self.data.clone())
            .expect("plane dims are consistent")
    }

    pub fn from_tensor(t: Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.into_data()),
            [h, w] => Self::new(1, h, w, t.into_data()),
            ref s => Err(MatteError::ShapeMismatch(format!("tensor {s:?} is not a plane"))),
        }
    }

    /// Channel-wise concatenation.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(MatteError::ShapeMismatch(format!(
                "concat {:?} with {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(self.channels + other.channels, self.height, self.width, data)
    }

    /// Copies the window `[y0, y0+h) x [x0, x0+w)`; must lie inside the plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(MatteError::ShapeMismatch(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(self.channels, h, w, |c, y, x| self.get(c, y0 + y, x0 + x))
    }

    /// Pads bottom/right by repeating the last row/column.
    pub fn pad_replicate(&self, h: usize, w: usize) -> Self {
        assert!(h >= self.height && w >= self.width);
        Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })
        .expect("replicated values stay finite")
    }
}

/// Snaps a gray value to the nearest trimap level if within `tol`.
pub fn snap_trimap_value(v: f64, tol: f64) -> Option<f64> {
    [0.0, 0.5, 1.0].into_iter().find(|level| (v - level).abs() <= tol)
}

/// RGB image plus trimap, both at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MattingInput<T = f32> {
    pub image: Plane<T>,
    pub trimap: Plane<T>,
}

impl<T: Real> MattingInput<T> {
    /// Builds and validates an input.
    pub fn new(image: Plane<T>, trimap: Plane<T>) -> Result<Self> {
        let input = Self { image, trimap };
        validate_matting_input(&input)?;
        Ok(input)
    }

    /// Builds an input after snapping trimap values within 1e-2 of a level.
    pub fn with_snapped_trimap(image: Plane<T>, trimap: Plane<T>) -> Result<Self> {
        let mut data = Vec::with_capacity(trimap.data().len());
        for (index, &v) in trimap.data().iter().enumerate() {
            let v = v.f64();
            let snapped = snap_trimap_value(v, TRIMAP_SNAP_TOL)
                .ok_or(MatteError::InvalidTrimapValue { value: v, index })?;
            data.push(T::of(snapped));
        }
        let trimap = Plane::new(trimap.channels(), trimap.height(), trimap.width(), data)?;
        Self::new(image, trimap)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    /// The 4-channel network input (RGB then trimap).
    pub fn stacked(&self) -> Plane<T> {
        self.image.concat(&self.trimap).expect("validated input has matching dims")
    }

    pub fn cast<U: Real>(&self) -> MattingInput<U> {
        MattingInput { image: self.image.cast(), trimap: self.trimap.cast() }
    }

    pub fn pad_replicate(&self, h: usize, w: usize) -> Self {
        Self { image: self.image.pad_replicate(h, w), trimap: self.trimap.pad_replicate(h, w) }
    }
}

pub fn validate_matting_input<T: Real>(input: &MattingInput<T>) -> Result<()> {
    let (image, trimap) = (&input.image, &input.trimap);
    if image.channels() != 3 {
        return Err(MatteError::ShapeMismatch(format!(
            "image must have 3 channels, has {}",
            image.channels()
        )));
    }
    if trimap.channels() != 1 {
        return Err(MatteError::ShapeMismatch(format!(
            "trimap must have 1 channel, has {}",
            trimap.channels()
        )));
    }
    if image.dims() != trimap.dims() {
        return Err(MatteError::ShapeMismatch(format!(
            "image {:?} vs trimap {:?}",
            image.dims(),
            trimap.dims()
        )));
    }
    // Planes are finite by construction, but the check is cheap and the
    // error must be reported distinctly.
    for (name, plane) in [("image", image), ("trimap", trimap)] {
        if plane.data().iter().any(|v| !v.is_finite()) {
            return Err(MatteError::NonFinite(name.to_string()));
        }
    }
    for (index, &v) in trimap.data().iter().enumerate() {
        let v = v.f64();
        if snap_trimap_value(v, TRIMAP_EXACT_TOL).is_none() {
            return Err(MatteError::InvalidTrimapValue { value: v, index });
        }
    }
    Ok(())
}
