//! Two-dimensional discrete Fourier transform on real fields.
//!
//! Convention: the forward transform is unnormalized and the inverse carries
//! the full `1/(H·W)` factor, so `ifft2(fft2(x)) == x`.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Complex spectrum of an `H×W` field, split into real and imaginary planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    pub height: usize,
    pub width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> Complex<f64> {
        let i = r * self.width + c;
        Complex::new(self.re[i], self.im[i])
    }

    fn to_complex(&self) -> Vec<Complex<f64>> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex::new(r, i))
            .collect()
    }

    fn from_complex(height: usize, width: usize, buf: &[Complex<f64>]) -> Self {
        Self {
            height,
            width,
            re: buf.iter().map(|c| c.re).collect(),
            im: buf.iter().map(|c| c.im).collect(),
        }
    }

    /// Largest deviation from `X[k] = conj(X[-k])`, relative to the largest
    /// coefficient magnitude.
    pub fn hermitian_defect(&self) -> f64 {
        let (h, w) = (self.height, self.width);
        let mut scale = 0.0f64;
        let mut defect = 0.0f64;
        for r in 0..h {
            for c in 0..w {
                let a = self.get(r, c);
                let b = self.get((h - r) % h, (w - c) % w);
                scale = scale.max(a.norm());
                defect = defect.max((a - b.conj()).norm());
            }
        }
        if scale == 0.0 {
            0.0
        } else {
            defect / scale
        }
    }

    /// Sum of squared coefficient magnitudes.
    pub fn power(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

/// Result of an inverse transform. `lossy` is set when the spectrum was not
/// Hermitian and the imaginary part of the inverse had to be discarded.
#[derive(Debug, Clone)]
pub struct InverseField {
    pub field: Tensor,
    pub lossy: bool,
}

const HERMITIAN_TOL: f64 = 1e-9;

fn transform_2d(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let (row_fft, col_fft) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        // rows in place
        row_fft.process(buf);
        // columns through a transposed scratch copy
        let mut t = vec![Complex::new(0.0, 0.0); h * w];
        for r in 0..h {
            for c in 0..w {
                t[c * h + r] = buf[r * w + c];
            }
        }
        col_fft.process(&mut t);
        for r in 0..h {
            for c in 0..w {
                buf[r * w + c] = t[c * h + r];
            }
        }
    });
}

fn dims_2d(field: &Tensor) -> Result<(usize, usize)> {
    match field.shape() {
        [h, w] => Ok((*h, *w)),
        s => Err(Error::invalid(format!("fft2 expects an H×W field, got shape {s:?}"))),
    }
}

/// Unnormalized forward 2D DFT of a real field.
pub fn fft2(field: &Tensor) -> Result<ComplexField> {
    let (h, w) = dims_2d(field)?;
    let mut buf: Vec<Complex<f64>> = field.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform_2d(&mut buf, h, w, false);
    Ok(ComplexField::from_complex(h, w, &buf))
}

/// Inverse 2D DFT (scaled by `1/(H·W)`) returning the full complex result.
pub fn ifft2_complex(spectrum: &ComplexField) -> ComplexField {
    let (h, w) = (spectrum.height, spectrum.width);
    let mut buf = spectrum.to_complex();
    transform_2d(&mut buf, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for v in &mut buf {
        *v *= scale;
    }
    ComplexField::from_complex(h, w, &buf)
}

/// Inverse 2D DFT back to a real field.
pub fn ifft2(spectrum: &ComplexField) -> Result<InverseField> {
    if spectrum.height == 0 || spectrum.width == 0 {
        return Err(Error::invalid("ifft2 of an empty spectrum"));
    }
    let lossy = spectrum.hermitian_defect() > HERMITIAN_TOL;
    let out = ifft2_complex(spectrum);
    let field = Tensor::from_parts(vec![spectrum.height, spectrum.width], out.re);
    Ok(InverseField { field, lossy })
}

/// Assignment of every spectral coefficient of an `H×W` grid to one of
/// `bands` equal-width annuli in normalized frequency radius.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialBands {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Band index per coefficient, row-major.
    pub index: Vec<usize>,
}

impl RadialBands {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        assert!(bands >= 1);
        // Largest radius on the grid is at the Nyquist corner.
        let fmax = |n: usize| (n / 2) as f64 / n as f64;
        let rmax = (fmax(height).powi(2) + fmax(width).powi(2)).sqrt();
        let mut index = Vec::with_capacity(height * width);
        for r in 0..height {
            let fy = r.min(height - r) as f64 / height as f64;
            for c in 0..width {
                let fx = c.min(width - c) as f64 / width as f64;
                let rad = (fy * fy + fx * fx).sqrt();
                let b = if rmax > 0.0 {
                    ((rad / rmax) * bands as f64).floor() as usize
                } else {
                    0
                };
                index.push(b.min(bands - 1));
            }
        }
        Self {
            height,
            width,
            bands,
            index,
        }
    }

    /// Band holding the coefficient at `(r, c)`.
    pub fn band_of(&self, r: usize, c: usize) -> usize {
        self.index[r * self.width + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_concentrates_in_dc() {
        let x = Tensor::filled(&[4, 4], 2.5);
        let s = fft2(&x).unwrap();
        assert!((s.re[0] - 40.0).abs() < 1e-12);
        for i in 1..16 {
            assert!(s.re[i].abs() < 1e-12 && s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros(&[4, 4]);
        x.data_mut()[0] = 1.0;
        let s = fft2(&x).unwrap();
        for i in 0..16 {
            assert!((s.get(i / 4, i % 4).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spectrum_inverts_to_zero() {
        let inv = ifft2(&ComplexField::zeros(3, 5)).unwrap();
        assert!(inv.field.data().iter().all(|&v| v == 0.0));
        assert!(!inv.lossy);
    }

    #[test]
    fn non_hermitian_input_is_flagged() {
        let mut s = ComplexField::zeros(4, 4);
        s.im[1] = 1.0;
        let inv = ifft2(&s).unwrap();
        assert!(inv.lossy);
    }

    #[test]
    fn rejects_non_matrix() {
        assert!(fft2(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
