//! Block normalization and assembly, the linear SVM, and the scene and
//! domain-adaptation evaluation harnesses.

mod da;
mod eval;
mod svm;
mod table;

pub use da::{draw_da_partition, run_da, source_cap, DaEncoder, DaMode, DaPartition, DaReport, DaSetting, SourceCap};
pub use eval::{confusion_matrix, evaluate_scene, overall_accuracy, SceneEval};
pub use svm::{svm_predict, svm_train, SvmModel, SvmParams};
pub use table::ResultsTable;

use crate::datamodel::{l2_norm, Block, FeatureVec, HybridRepresentation};
use crate::error::{Error, Result};

/// `v / |v|`; the zero vector is returned unchanged. Used for FCR blocks and,
/// by default, for the MLR block.
pub fn l2_normalize(v: &FeatureVec) -> FeatureVec {
    let n = l2_norm(v);
    if n == 0.0 {
        return v.clone();
    }
    FeatureVec::from_raw(v.iter().map(|x| x / n).collect())
}

/// Parses a row label such as `"MLR+CFV+FCR1-w"` into its blocks.
pub fn parse_selection(label: &str) -> Result<Vec<Block>> {
    let blocks = label.split('+').map(Block::parse).collect::<Result<Vec<_>>>()?;
    canonical(&blocks)
}

fn canonical(selection: &[Block]) -> Result<Vec<Block>> {
    let mut sel = selection.to_vec();
    sel.sort();
    sel.dedup();
    if sel.is_empty() {
        return Err(Error::invalid("empty block selection"));
    }
    Ok(sel)
}

/// Concatenates the selected blocks in canonical order (MLR, CFV, FCR1,
/// FCR2, then external blocks by name), whatever the order of the inputs.
pub fn assemble(blocks: &[(Block, FeatureVec)], selection: &[Block]) -> Result<HybridRepresentation> {
    let mut out = Vec::new();
    for b in canonical(selection)? {
        let v = blocks
            .iter()
            .find(|(name, _)| *name == b)
            .ok_or_else(|| Error::MissingFeature(format!("block {b}")))?;
        out.push(v.clone());
    }
    HybridRepresentation::new(out)
}
