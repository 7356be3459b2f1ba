//! Channel-major activation arrays.

use crate::Scalar;

/// `channels x height x width` activation array, row-major inside a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "feature map data length does not match shape"
        );
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::from_vec(channels, height, width, data)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation.
    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "concat spatial mismatch"
        );
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Self::from_vec(self.channels + other.channels, self.height, self.width, data)
    }

    /// Split off the leading `channels` channels.
    pub fn split_channels(&self, channels: usize) -> (Self, Self) {
        assert!(channels <= self.channels);
        let cut = channels * self.plane_len();
        (
            Self::from_vec(channels, self.height, self.width, self.data[..cut].to_vec()),
            Self::from_vec(
                self.channels - channels,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    /// Average pooling with a square window of `factor` and the same stride.
    pub fn avg_pool(&self, factor: usize) -> Self {
        assert!(factor >= 1 && self.height % factor == 0 && self.width % factor == 0);
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = T::one() / T::c((factor * factor) as f64);
        Self::from_fn(self.channels, h, w, |c, y, x| {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(c, y * factor + dy, x * factor + dx);
                }
            }
            acc * norm
        })
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::c(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_restores_parts() {
        let a = FeatureMap::<f64>::from_fn(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64);
        let b = FeatureMap::<f64>::filled(1, 3, 3, -1.0);
        let joined = a.concat(&b);
        assert_eq!(joined.shape(), [3, 3, 3]);
        let (l, r) = joined.split_channels(2);
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn avg_pool_averages_blocks() {
        let a = FeatureMap::<f64>::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        let p = a.avg_pool(2);
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
    }
}
