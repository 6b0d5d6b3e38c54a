//! Scene directories: `image_NNNNN.pgm`, `gts_NNNNN.jsonl` and
//! `proposals_NNNNN.jsonl` per scene.

use std::fs;
use std::path::Path;

use pst_core::experiment::Sample;
use pst_core::io::{read_jsonl, read_pgm, write_jsonl, write_pgm};
use pst_core::labeling::ProposalSet;
use pst_core::synth::Scene;
use pst_core::{BoundingBox, Error, Result};

pub fn write_sample(dir: &Path, index: usize, s: &Sample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    write_pgm(&dir.join(format!("image_{index:05}.pgm")), &s.scene.image)?;
    write_jsonl(&dir.join(format!("gts_{index:05}.jsonl")), &s.scene.gts)?;
    write_jsonl(&dir.join(format!("proposals_{index:05}.jsonl")), s.proposals.boxes())
}

/// Every scene in `dir`, ordered by index.
pub fn read_dir(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut indices: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let idx = name.strip_prefix("image_")?.strip_suffix(".pgm")?;
            idx.bytes().all(|b| b.is_ascii_digit()).then(|| idx.to_string())
        })
        .collect();
    indices.sort();
    if indices.is_empty() {
        return Err(Error::Config(format!("{}: no image_*.pgm scenes found", dir.display())));
    }
    indices
        .iter()
        .map(|idx| {
            let image = read_pgm(&dir.join(format!("image_{idx}.pgm")))?;
            let gts: Vec<BoundingBox> = read_jsonl(&dir.join(format!("gts_{idx}.jsonl")))?;
            let proposals: Vec<BoundingBox> = read_jsonl(&dir.join(format!("proposals_{idx}.jsonl")))?;
            Ok(Sample {
                scene: Scene { image, gts },
                proposals: ProposalSet::new(proposals),
            })
        })
        .collect()
}
