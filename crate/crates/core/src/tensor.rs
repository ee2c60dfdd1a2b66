//! Grayscale images and diffusion latents.
//!
//! At desk scale the diffusion process runs directly in pixel space, so a
//! latent is an image-shaped buffer carrying the timestep it belongs to.

use crate::error::{Error, Result};

/// A single-channel image stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} pixels", height * width),
                format!("{} pixels", pixels.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    /// Maps a `[-1, 1]` image onto `[0, 1]`.
    pub fn to_unit_range(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| (p + 1.0) * 0.5).collect(),
        }
    }

    /// Maps a `[0, 1]` image onto `[-1, 1]`.
    pub fn from_unit_range(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| p * 2.0 - 1.0).collect(),
        }
    }

    /// Clamps to `[-1, 1]` and snaps to the 8-bit grid, the way a sample
    /// would look after being saved as an ordinary image file.
    pub fn quantize_8bit(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .map(|&p| {
                    let unit = ((p + 1.0) * 0.5).clamp(0.0, 1.0);
                    (unit * 255.0).round() / 255.0 * 2.0 - 1.0
                })
                .collect(),
        }
    }
}

/// A diffusion latent `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(height: usize, width: usize, data: Vec<f32>, timestep: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width} = {} values", height * width),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
            timestep,
        })
    }

    /// The clean latent `z_0` of an image.
    pub fn from_image(image: &Image) -> Self {
        Self {
            height: image.height,
            width: image.width,
            data: image.pixels.clone(),
            timestep: 0,
        }
    }

    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            pixels: self.data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

pub(crate) fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(
            format!("{expected} values"),
            format!("{actual} values"),
        ))
    }
}
