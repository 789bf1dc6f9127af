//! The training objective: per-pixel L2, an L1 penalty on the difference of
//! image gradients, and total variation of the static color volume.
//!
//! The free functions here evaluate the objective directly; the trainer
//! records the same terms on a tape (see [`diff_map`] and [`tv_map`]).

use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, SparseMap};
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l2: f64,
    pub grad_l1: f64,
    pub tvc: f64,
}

/// A dense `[planes][height][width][channels]` volume.
#[derive(Clone, Copy, Debug)]
pub struct VolumeView<'a> {
    pub data: &'a [f64],
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VolumeView<'_> {
    fn check(&self) -> Result<()> {
        ensure!(
            self.planes * self.height * self.width * self.channels == self.data.len() && !self.data.is_empty(),
            Shape,
            "volume of {} values does not match [{}][{}][{}][{}]",
            self.data.len(),
            self.planes,
            self.height,
            self.width,
            self.channels
        );
        Ok(())
    }
}

/// Anisotropic total variation: the mean absolute forward difference along
/// u and v over every plane and channel.
pub fn tvc(volume: VolumeView<'_>) -> Result<f64> {
    volume.check()?;
    let VolumeView {
        data,
        planes,
        height,
        width,
        channels,
    } = volume;
    let at = |s: usize, y: usize, x: usize, c: usize| data[((s * height + y) * width + x) * channels + c];
    let diffs = planes * channels * ((width - 1) * height + width * (height - 1));
    if diffs == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for s in 0..planes {
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    if x + 1 < width {
                        sum += (at(s, y, x + 1, c) - at(s, y, x, c)).abs();
                    }
                    if y + 1 < height {
                        sum += (at(s, y + 1, x, c) - at(s, y, x, c)).abs();
                    }
                }
            }
        }
    }
    Ok(sum / diffs as f64)
}

/// Evaluates the objective on square RGB patches stored back to back
/// (`side * side * 3` values each, row-major).
pub fn patch_loss(
    pred: &[f64],
    gt: &[f64],
    side: usize,
    static_color: VolumeView<'_>,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossTerms> {
    ensure!(pred.len() == gt.len(), Shape, "prediction has {} values, target {}", pred.len(), gt.len());
    let area = side * side * 3;
    ensure!(
        side >= 1 && !pred.is_empty() && pred.len().is_multiple_of(area),
        Shape,
        "{} values do not form {side}x{side} RGB patches",
        pred.len()
    );
    ensure!(lambda1 >= 0.0 && lambda2 >= 0.0, Contract, "loss weights must be non-negative");
    ensure!(
        lambda1 == 0.0 || side >= 2,
        Contract,
        "the gradient term needs patches of side at least 2"
    );
    let l2 = pred.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64;
    let grad_l1 = if side >= 2 {
        let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p - g).collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for patch in e.chunks_exact(area) {
            let at = |y: usize, x: usize, c: usize| patch[(y * side + x) * 3 + c];
            for y in 0..side {
                for x in 0..side {
                    for c in 0..3 {
                        if x + 1 < side {
                            sum += (at(y, x + 1, c) - at(y, x, c)).abs();
                            count += 1;
                        }
                        if y + 1 < side {
                            sum += (at(y + 1, x, c) - at(y, x, c)).abs();
                            count += 1;
                        }
                    }
                }
            }
        }
        sum / count as f64
    } else {
        0.0
    };
    let tv = tvc(static_color)?;
    Ok(LossTerms {
        total: l2 + lambda1 * grad_l1 + lambda2 * tv,
        l2,
        grad_l1,
        tvc: tv,
    })
}

/// Forward differences inside each patch: rows of the result are
/// `x[i + 1] - x[i]` along x, then along y, for `patches` consecutive
/// blocks of `side * side` rows.
pub fn diff_map<R: Real>(patches: usize, side: usize) -> SparseMap<R> {
    let area = side * side;
    let mut map = SparseMap::new(patches * area);
    for p in 0..patches {
        let base = p * area;
        for y in 0..side {
            for x in 0..side {
                let i = base + y * side + x;
                if x + 1 < side {
                    map.push_row(&[(i + 1, R::one()), (i, -R::one())]);
                }
                if y + 1 < side {
                    map.push_row(&[(i + side, R::one()), (i, -R::one())]);
                }
            }
        }
    }
    map
}

/// Forward differences along u and v of a `[planes][height][width]` grid of
/// rows (one row per texel).
pub fn tv_map<R: Real>(planes: usize, height: usize, width: usize) -> SparseMap<R> {
    let mut map = SparseMap::new(planes * height * width);
    for s in 0..planes {
        for y in 0..height {
            for x in 0..width {
                let i = (s * height + y) * width + x;
                if x + 1 < width {
                    map.push_row(&[(i + 1, R::one()), (i, -R::one())]);
                }
                if y + 1 < height {
                    map.push_row(&[(i + width, R::one()), (i, -R::one())]);
                }
            }
        }
    }
    map
}
