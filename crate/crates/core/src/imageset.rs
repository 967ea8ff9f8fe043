//! Synthetic attack image sets and their line-oriented manifest format.
//!
//! Every image carries the shared Ubuntu-sized base layer followed by `k`
//! filler layers. Filler and base sizes are on-disk (uncompressed) sizes;
//! the registry copy is smaller by a uniform compression factor.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{Digest, ImageSet, ImageSpec, LayerSpec};

/// Gzip ratio measured on the filler layers.
pub const COMPRESSION_FACTOR: f64 = 0.504;
/// Uncompressed size of the shared base layer.
pub const BASE_LAYER_BYTES: u64 = 80_000_000;
/// A nominal "2 GB" filler layer occupies 2.04 GB on disk.
pub const GB_LAYER_BYTES: u64 = 2_040_000_000;
/// A nominal "20 MB" filler layer occupies 20.4 MB on disk.
pub const MB_LAYER_BYTES: u64 = 20_400_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageSetKind {
    VariableGB,
    VariableMB,
}

impl ImageSetKind {
    pub fn image_count(self) -> usize {
        match self {
            ImageSetKind::VariableGB => 7,
            ImageSetKind::VariableMB => 40,
        }
    }

    pub fn layer_bytes(self) -> u64 {
        match self {
            ImageSetKind::VariableGB => GB_LAYER_BYTES,
            ImageSetKind::VariableMB => MB_LAYER_BYTES,
        }
    }

    fn repo(self) -> &'static str {
        match self {
            ImageSetKind::VariableGB => "registry.local/variable-gb",
            ImageSetKind::VariableMB => "registry.local/variable-mb",
        }
    }

    fn salt(self) -> u64 {
        match self {
            ImageSetKind::VariableGB => 0x6762_5f73_6574,
            ImageSetKind::VariableMB => 0x6d62_5f73_6574,
        }
    }
}

impl std::str::FromStr for ImageSetKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-', ' '], "").as_str() {
            "variablegb" | "vargb" => Ok(ImageSetKind::VariableGB),
            "variablemb" | "varmb" => Ok(ImageSetKind::VariableMB),
            _ => Err(format!("unknown image set '{s}' (expected VariableGB or VariableMB)")),
        }
    }
}

/// Builds one of the two attack image sets. Image `k` (1-based) holds the
/// base plus `k` filler layers; the seed only picks the synthetic digests.
pub fn generate_image_set(kind: ImageSetKind, seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind.salt());
    let mut used = BTreeSet::new();
    let mut fresh = move || loop {
        let d: u64 = rng.gen();
        if used.insert(d) {
            break Digest(d);
        }
    };
    let base = LayerSpec::with_ratio(fresh(), BASE_LAYER_BYTES, COMPRESSION_FACTOR).expect("base layer is non-empty");
    let images = (1..=kind.image_count())
        .map(|k| {
            let mut layers = Vec::with_capacity(k + 1);
            layers.push(base);
            for _ in 0..k {
                layers.push(
                    LayerSpec::with_ratio(fresh(), kind.layer_bytes(), COMPRESSION_FACTOR)
                        .expect("filler layer is non-empty"),
                );
            }
            ImageSpec::new(format!("{}:{k}", kind.repo()), layers).expect("image has layers")
        })
        .collect();
    ImageSet::new(images, Some(base)).expect("base leads every image")
}

/// Renders the set as `image <name>` headers followed by one
/// `<digest> <compressed> <uncompressed>` line per layer.
pub fn write_manifest(set: &ImageSet) -> String {
    let mut out = String::new();
    for image in &set.images {
        let _ = writeln!(out, "image {}", image.name);
        for l in &image.layers {
            let _ = writeln!(out, "{} {} {}", l.digest, l.compressed_bytes, l.uncompressed_bytes);
        }
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<ImageSet, ModelError> {
    let mut images: Vec<(String, Vec<LayerSpec>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| ModelError::Manifest {
            line: line_no,
            reason: reason.to_string(),
        };
        if let Some(name) = line.strip_prefix("image ") {
            images.push((name.trim().to_string(), Vec::new()));
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [digest, compressed, uncompressed] = fields[..] else {
            return Err(err("expected: digest compressed uncompressed"));
        };
        let hex = digest
            .strip_prefix("sha256:")
            .ok_or_else(|| err("digest must start with sha256:"))?;
        let digest = u64::from_str_radix(hex, 16).map_err(|_| err("digest is not hex"))?;
        let compressed = compressed.parse().map_err(|_| err("bad compressed size"))?;
        let uncompressed = uncompressed.parse().map_err(|_| err("bad uncompressed size"))?;
        let layer = LayerSpec::new(Digest(digest), compressed, uncompressed).map_err(|e| err(&e.to_string()))?;
        match images.last_mut() {
            Some((_, layers)) => layers.push(layer),
            None => return Err(err("layer before any image header")),
        }
    }
    let images = images
        .into_iter()
        .map(|(name, layers)| ImageSpec::new(name, layers))
        .collect::<Result<Vec<_>, _>>()?;
    let shared_base = images
        .first()
        .map(|i| i.layers[0])
        .filter(|base| images.len() > 1 && images.iter().all(|i| i.layers.first() == Some(base)));
    ImageSet::new(images, shared_base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GB;
    use proptest::prelude::*;

    #[test]
    fn variable_gb_matches_table_totals() {
        let set = generate_image_set(ImageSetKind::VariableGB, 0);
        assert_eq!(set.len(), 7);
        let unc = set.dedup_uncompressed() as f64 / GB;
        let comp = set.dedup_compressed() as f64 / GB;
        assert!((unc - 57.12).abs() / 57.12 < 0.02, "uncompressed {unc}");
        assert!((comp - 28.88).abs() / 28.88 < 0.02, "compressed {comp}");
        let sizes: Vec<f64> = set.images.iter().map(|i| i.total_uncompressed() as f64 / GB).collect();
        assert!((sizes[0] - 2.12).abs() < 1e-9);
        assert!((sizes[6] - 14.40).abs() / 14.40 < 0.01);
    }

    #[test]
    fn variable_mb_matches_table_totals() {
        let set = generate_image_set(ImageSetKind::VariableMB, 0);
        assert_eq!(set.len(), 40);
        let unc = set.dedup_uncompressed() as f64 / GB;
        let comp = set.dedup_compressed() as f64 / GB;
        assert!((unc - 16.80).abs() / 16.80 < 0.02, "uncompressed {unc}");
        assert!((comp - 8.47).abs() / 8.47 < 0.02, "compressed {comp}");
        let largest = set.images.iter().map(ImageSpec::total_uncompressed).max().unwrap() as f64 / GB;
        assert!((largest - 0.90).abs() < 0.01, "largest {largest}");
        let smallest = set.images[0].total_uncompressed() as f64 / GB;
        assert!((smallest - 0.10).abs() < 0.001);
    }

    #[test]
    fn compressed_sizes_use_uniform_factor() {
        let set = generate_image_set(ImageSetKind::VariableGB, 3);
        for layer in set.images.iter().flat_map(|i| &i.layers) {
            let expect = (layer.uncompressed_bytes as f64 * COMPRESSION_FACTOR).round() as u64;
            assert_eq!(layer.compressed_bytes, expect);
        }
    }

    #[test]
    fn same_seed_same_set() {
        assert_eq!(
            generate_image_set(ImageSetKind::VariableMB, 9),
            generate_image_set(ImageSetKind::VariableMB, 9)
        );
        assert_ne!(
            generate_image_set(ImageSetKind::VariableMB, 9),
            generate_image_set(ImageSetKind::VariableMB, 10)
        );
    }

    #[test]
    fn manifest_rejects_garbage() {
        assert!(parse_manifest("sha256:01 1 2\n").is_err());
        assert!(parse_manifest("image a\nsha256:zz 1 2\n").is_err());
        assert!(parse_manifest("image a\nsha256:01 0 2\n").is_err());
        assert!(parse_manifest("image a\n").is_err());
    }

    proptest! {
        #[test]
        fn images_share_only_the_base(seed in any::<u64>(), mb in any::<bool>()) {
            let kind = if mb { ImageSetKind::VariableMB } else { ImageSetKind::VariableGB };
            let set = generate_image_set(kind, seed);
            let base = set.shared_base.unwrap();
            for (i, a) in set.images.iter().enumerate() {
                for b in &set.images[i + 1..] {
                    let da: BTreeSet<_> = a.layers.iter().map(|l| l.digest).collect();
                    let db: BTreeSet<_> = b.layers.iter().map(|l| l.digest).collect();
                    let common: Vec<_> = da.intersection(&db).copied().collect();
                    prop_assert_eq!(common, vec![base.digest]);
                }
            }
            prop_assert!(set.dedup_compressed() < set.naive_compressed());
        }

        #[test]
        fn manifest_round_trips(seed in any::<u64>(), mb in any::<bool>()) {
            let kind = if mb { ImageSetKind::VariableMB } else { ImageSetKind::VariableGB };
            let set = generate_image_set(kind, seed);
            prop_assert_eq!(parse_manifest(&write_manifest(&set)).unwrap(), set);
        }
    }
}
