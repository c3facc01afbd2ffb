//! Mid-level local representation: dense multi-scale region features coded
//! against the part dictionary, then max-pooled over a spatial pyramid.

use serde::{Deserialize, Serialize};

use crate::coding::{llc_approx, LlcParams};
use crate::datamodel::{FeatureTensor, FeatureVec, ImageRecord};
use crate::dictionary::PartDictionary;
use crate::error::{Error, Result};
use crate::extractors::FeatureExtractor;

/// Pyramid levels as `(rows, cols)` cell grids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpmLayout {
    pub levels: Vec<(usize, usize)>,
}

impl Default for SpmLayout {
    fn default() -> Self {
        Self { levels: vec![(1, 1), (2, 2), (3, 1)] }
    }
}

impl SpmLayout {
    pub fn cells(&self) -> usize {
        self.levels.iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlrConfig {
    /// Dense-grid square sides, in pixels.
    pub squares: Vec<u32>,
    pub stride: u32,
    pub llc: LlcParams,
    pub layout: SpmLayout,
}

impl MlrConfig {
    pub fn new(llc: LlcParams) -> Self {
        Self { squares: vec![128, 92, 64], stride: 32, llc, layout: SpmLayout::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.squares.is_empty() || self.stride == 0 {
            return Err(Error::invalid("MLR needs at least one square size and stride >= 1"));
        }
        if self.layout.levels.iter().any(|&(r, c)| r == 0 || c == 0) {
            return Err(Error::invalid("SPM levels must have >= 1 row and column"));
        }
        self.llc.validate()
    }

    pub fn output_dim(&self, atoms: usize) -> usize {
        self.squares.len() * atoms * self.layout.cells()
    }
}

/// Codes every grid location, giving `K` maps of the input's spatial size.
pub fn code_maps(tensor: &FeatureTensor, dict: &PartDictionary, llc: &LlcParams) -> Result<FeatureTensor> {
    if tensor.d() != dict.dim() {
        return Err(Error::dims(dict.dim(), tensor.d()));
    }
    let codes = tensor
        .columns()
        .iter()
        .map(|col| llc_approx(col, dict, llc).map(FeatureVec::into_vec))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureTensor::from_columns(dict.len(), tensor.h(), tensor.w(), &codes)?.with_scale(tensor.scale_id))
}

/// `[floor(i * n / parts), floor((i + 1) * n / parts))`, widened to one
/// element when empty.
pub(crate) fn cell_range(i: usize, parts: usize, n: usize) -> (usize, usize) {
    let start = i * n / parts;
    let end = (i + 1) * n / parts;
    if end > start {
        (start, end)
    } else {
        let s = start.min(n - 1);
        (s, s + 1)
    }
}

/// Per-channel max over every pyramid cell; cells level-major then row-major,
/// channels contiguous within a cell.
pub fn spm_pool(maps: &FeatureTensor, layout: &SpmLayout) -> Result<FeatureVec> {
    let (k, h, w) = (maps.d(), maps.h(), maps.w());
    if k == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("cannot pool an empty map"));
    }
    let mut out = Vec::with_capacity(k * layout.cells());
    for &(rows, cols) in &layout.levels {
        for r in 0..rows {
            let (r0, r1) = cell_range(r, rows, h);
            for c in 0..cols {
                let (c0, c1) = cell_range(c, cols, w);
                for ch in 0..k {
                    let mut m = f32::NEG_INFINITY;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            m = m.max(maps.get(ch, i, j));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    FeatureVec::new(out)
}

/// Full MLR of one image: per square size, dense grid, coding and pyramid
/// pooling, concatenated in square order.
pub fn encode_mlr(
    image: &ImageRecord,
    extractor: &dyn FeatureExtractor,
    dict: &PartDictionary,
    cfg: &MlrConfig,
) -> Result<FeatureVec> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.output_dim(dict.len()));
    for &square in &cfg.squares {
        let grid = extractor.dense_grid(image, square, cfg.stride)?;
        let maps = code_maps(&grid, dict, &cfg.llc)?;
        out.extend(spm_pool(&maps, &cfg.layout)?.into_vec());
    }
    FeatureVec::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Matrix;

    #[test]
    fn layout_has_eight_cells() {
        assert_eq!(SpmLayout::default().cells(), 8);
    }

    #[test]
    fn pool_enumerated_cells() {
        let maps = FeatureTensor::new(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let v = spm_pool(&maps, &SpmLayout::default()).unwrap();
        // level 1x1, then 2x2 cells over rows [0,1),[1,3) x cols [0,1),[1,3), then 3x1 rows
        assert_eq!(v.as_slice(), &[9.0, 1.0, 3.0, 7.0, 9.0, 3.0, 6.0, 9.0]);
    }

    #[test]
    fn pool_constant_and_length() {
        let maps = FeatureTensor::new(4, 5, 5, vec![2.5; 100]).unwrap();
        let v = spm_pool(&maps, &SpmLayout::default()).unwrap();
        assert_eq!(v.dim(), 32);
        assert!(v.iter().all(|&x| x == 2.5));
    }

    #[test]
    fn pool_small_maps_use_clamped_cells() {
        let maps = FeatureTensor::new(1, 1, 2, vec![1.0, 4.0]).unwrap();
        let v = spm_pool(&maps, &SpmLayout::default()).unwrap();
        assert_eq!(v.as_slice(), &[4.0, 1.0, 4.0, 1.0, 4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn single_location_code_map() {
        let dict = PartDictionary::from_atoms(Matrix::from_rows(&[vec![0.0f32, 0.0], vec![1.0, 1.0], vec![3.0, 0.0]]).unwrap()).unwrap();
        let llc = LlcParams { lambda: 1e-4, tau: 1.0, knn: 2 };
        let t = FeatureTensor::new(2, 1, 1, vec![0.8, 0.9]).unwrap();
        let maps = code_maps(&t, &dict, &llc).unwrap();
        assert_eq!((maps.d(), maps.h(), maps.w()), (3, 1, 1));
        assert_eq!(maps.column(0, 0), llc_approx(&[0.8, 0.9], &dict, &llc).unwrap().into_vec());
    }

    #[test]
    fn code_maps_rejects_dim_mismatch() {
        let dict = PartDictionary::from_atoms(Matrix::from_rows(&[vec![0.0f32, 0.0]]).unwrap()).unwrap();
        let t = FeatureTensor::new(3, 1, 1, vec![0.0; 3]).unwrap();
        assert!(code_maps(&t, &dict, &LlcParams { lambda: 0.0, tau: 1.0, knn: 1 }).is_err());
    }

    #[test]
    fn mlr_dimension_formula() {
        let cfg = MlrConfig::new(LlcParams { lambda: 1e-4, tau: 1.0, knn: 5 });
        assert_eq!(cfg.output_dim(2680), 64_320);
        assert_eq!(cfg.output_dim(3970), 95_280);
    }
}
