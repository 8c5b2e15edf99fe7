//! Channel-averaged attention maps as CSV.

use std::path::{Path, PathBuf};

use avcil_core::datasets::FeatureDataset;
use avcil_core::model::{infer, Batch, Modality, ModelParams};

use crate::error::{config_err, HarnessError, Result};
use crate::experiments::write_file;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    pub sample_id: u32,
    /// `frames x cells`; each row sums to one.
    pub spatial: Vec<Vec<f64>>,
    /// One weight per frame; sums to one.
    pub temporal: Vec<f64>,
}

pub fn export_attention(params: &ModelParams, ds: &FeatureDataset, sample_ids: &[u32]) -> Result<Vec<AttentionExport>> {
    params.check()?;
    if params.d != ds.geometry.d {
        return Err(config_err(format!(
            "checkpoint width {} does not match dataset width {}",
            params.d, ds.geometry.d
        )));
    }
    if sample_ids.is_empty() {
        return Err(config_err("no sample ids given"));
    }
    let mut samples = Vec::with_capacity(sample_ids.len());
    for &id in sample_ids {
        let i = ds
            .index_of(id)
            .ok_or_else(|| config_err(format!("sample id {id} is not in the dataset")))?;
        samples.push(&ds.samples[i]);
    }
    let inf = infer(params, &Batch::from_samples(&samples, ds.geometry)?, Modality::Audiovisual)?;
    Ok(sample_ids
        .iter()
        .enumerate()
        .map(|(i, &sample_id)| {
            let maps = inf.maps(i).expect("audiovisual inference carries maps");
            AttentionExport {
                sample_id,
                spatial: maps.spatial_channel_mean(),
                temporal: maps.temporal_channel_mean(),
            }
        })
        .collect())
}

fn to_csv(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| HarnessError::Config(format!("csv buffer: {e}")))
}

/// Header `frame,cell_0,..`; one row per frame.
pub fn spatial_csv(e: &AttentionExport) -> Result<Vec<u8>> {
    let cells = e.spatial.first().map_or(0, Vec::len);
    let mut header = vec!["frame".to_string()];
    header.extend((0..cells).map(|s| format!("cell_{s}")));
    to_csv(
        header,
        e.spatial.iter().enumerate().map(|(l, row)| {
            std::iter::once(l.to_string()).chain(row.iter().map(f64::to_string)).collect()
        }),
    )
}

/// Header `frame,weight`.
pub fn temporal_csv(e: &AttentionExport) -> Result<Vec<u8>> {
    to_csv(
        vec!["frame".into(), "weight".into()],
        e.temporal.iter().enumerate().map(|(l, w)| vec![l.to_string(), w.to_string()]),
    )
}

/// Writes `sample_<id>_spatial.csv` and `sample_<id>_temporal.csv` per export.
pub fn write_attention(out_dir: &Path, exports: &[AttentionExport]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for e in exports {
        let spa = out_dir.join(format!("sample_{}_spatial.csv", e.sample_id));
        write_file(&spa, &spatial_csv(e)?)?;
        let tem = out_dir.join(format!("sample_{}_temporal.csv", e.sample_id));
        write_file(&tem, &temporal_csv(e)?)?;
        written.push(spa);
        written.push(tem);
    }
    Ok(written)
}
