//! AVCF: little-endian feature file.
//!
//! ```text
//! "AVCF" u32 version u32 N u32 d u32 L u32 S u32 num_classes
//! N x { u32 sample_id, u32 label, u8 split, f32[d] audio, f32[L*S*d] visual }
//! u32 manifest_len, manifest_len bytes of UTF-8 JSON
//! ```

use std::fs;
use std::path::Path;

use super::{FeatureDataset, FeatureSample, Geometry, Manifest, Split};
use crate::binio::{u32_field, write_atomic, Reader};
use crate::error::{Error, Result};

pub const FORMAT_MAGIC: &[u8; 4] = b"AVCF";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_dataset(ds: &FeatureDataset) -> Result<Vec<u8>> {
    ds.check_samples()?;
    let g = ds.geometry;
    let record = 9 + 4 * (g.d + g.visual_len());
    let mut out = Vec::with_capacity(28 + ds.samples.len() * record + 256);
    out.extend_from_slice(FORMAT_MAGIC);
    for v in [
        FORMAT_VERSION,
        u32_field(ds.samples.len(), "sample count")?,
        u32_field(g.d, "d")?,
        u32_field(g.frames, "L")?,
        u32_field(g.cells, "S")?,
        u32_field(ds.num_classes, "num_classes")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in &ds.samples {
        out.extend_from_slice(&s.sample_id.to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        out.push(s.split.tag());
        for &v in s.audio.iter().chain(&s.visual) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = serde_json::to_vec(&ds.manifest)?;
    out.extend_from_slice(&u32_field(manifest.len(), "manifest length")?.to_le_bytes());
    out.extend_from_slice(&manifest);
    Ok(out)
}

/// Writes atomically: a sibling temp file renamed into place.
pub fn save_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    write_atomic(path, &write_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<FeatureDataset> {
    let bytes = fs::read(path)?;
    read_dataset(&bytes)
}

pub fn read_dataset(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != FORMAT_MAGIC {
        r.pos = 0;
        return Err(r.fail(format!("bad magic {magic:?}, expected \"AVCF\"")));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let n = r.u32("sample count")? as usize;
    let geometry = Geometry {
        d: r.u32("d")? as usize,
        frames: r.u32("L")? as usize,
        cells: r.u32("S")? as usize,
    };
    let num_classes = r.u32("num_classes")? as usize;

    let mut samples = Vec::with_capacity(n.min(1 << 20));
    for i in 0..n {
        let sample_id = r.u32("sample_id")?;
        let label = r.u32("label")?;
        let tag = r.take(1, "split tag")?[0];
        let split = Split::from_tag(tag).ok_or_else(|| {
            r.pos -= 1;
            r.fail(format!("record {i}: invalid split tag {tag}"))
        })?;
        let audio = r.f32s(geometry.d, "audio features")?;
        let visual = r.f32s(geometry.visual_len(), "visual features")?;
        samples.push(FeatureSample {
            sample_id,
            label,
            split,
            audio,
            visual,
        });
    }
    let mlen = r.u32("manifest length")? as usize;
    let mstart = r.pos;
    let mbytes = r.take(mlen, "manifest")?;
    let manifest: Manifest = serde_json::from_slice(mbytes).map_err(|e| Error::Format {
        offset: mstart as u64,
        message: format!("invalid manifest JSON: {e}"),
    })?;
    r.finish()?;
    let ds = FeatureDataset {
        geometry,
        num_classes,
        samples,
        manifest,
    };
    ds.check_samples().map_err(|e| Error::Format {
        offset: 28,
        message: e.to_string(),
    })?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_synthetic, GeneratorMode, GeneratorSpec};
    use proptest::prelude::*;

    fn small() -> FeatureDataset {
        generate_synthetic(&GeneratorSpec {
            num_classes: 3,
            train_per_class: 2,
            val_per_class: 1,
            test_per_class: 1,
            d: 4,
            frames: 2,
            cells: 3,
            ..GeneratorSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let ds = small();
        let bytes = write_dataset(&ds).unwrap();
        assert_eq!(read_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn empty_round_trip() {
        let ds = FeatureDataset::new(
            Geometry {
                d: 2,
                frames: 1,
                cells: 1,
            },
            0,
            Vec::new(),
        )
        .unwrap();
        let bytes = write_dataset(&ds).unwrap();
        assert_eq!(read_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.avcf");
        let ds = small();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = write_dataset(&small()).unwrap();
        bytes[1] = b'X';
        match read_dataset(&bytes) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_version() {
        let mut bytes = write_dataset(&small()).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_dataset(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = write_dataset(&small()).unwrap();
        for cut in [3, 10, 28, 40, bytes.len() - 1] {
            match read_dataset(&bytes[..cut]) {
                Err(Error::Format { offset, message }) => {
                    assert!(offset as usize <= cut, "{offset} > {cut}");
                    assert!(message.contains("truncated"), "{message}");
                }
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let ds = small();
        let bytes = write_dataset(&ds).unwrap();
        assert_eq!(&bytes[0..4], b"AVCF");
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!(
            [word(0), word(1), word(2), word(3), word(4), word(5)],
            [1, 12, 4, 2, 3, 3]
        );
        // first record: id 0, label 0, split train
        assert_eq!(&bytes[28..37], &[0, 0, 0, 0, 0, 0, 0, 0, 0]);
        let record = 9 + 4 * (4 + 2 * 3 * 4);
        let mlen_at = 28 + 12 * record;
        let mlen = u32::from_le_bytes(bytes[mlen_at..mlen_at + 4].try_into().unwrap()) as usize;
        assert_eq!(mlen_at + 4 + mlen, bytes.len());
        let _: serde_json::Value = serde_json::from_slice(&bytes[mlen_at + 4..]).unwrap();
    }

    proptest! {
        #[test]
        fn random_datasets_round_trip_bit_exact(
            seed in 0u64..10_000,
            classes in 1usize..4,
            d in 1usize..5,
            frames in 1usize..3,
            cells in 1usize..3,
            xor in proptest::bool::ANY,
        ) {
            let spec = GeneratorSpec {
                mode: if xor { GeneratorMode::XorPairs } else { GeneratorMode::Aligned },
                num_classes: if xor { 4 } else { classes },
                xor_audio_groups: 2,
                train_per_class: 2,
                val_per_class: 0,
                test_per_class: 1,
                d, frames, cells,
                seed,
                ..GeneratorSpec::default()
            };
            let ds = generate_synthetic(&spec).unwrap();
            let bytes = write_dataset(&ds).unwrap();
            let back = read_dataset(&bytes).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(write_dataset(&back).unwrap(), bytes);
        }
    }
}
