//! Run-length pixel sets and the stable segment identity derived from them.

use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Stable 64-bit segment identity: FNV-1a over the image id and the
/// sorted run encoding of the segment's pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SegmentKey(pub u64);

impl SegmentKey {
    pub fn compute(image_id: &str, runs: &RunLength) -> Self {
        let mut hasher = FnvHasher::default();
        hasher.write(image_id.as_bytes());
        hasher.write(&[0]);
        for run in runs.runs() {
            hasher.write(&run.start.to_le_bytes());
            hasher.write(&run.length.to_le_bytes());
        }
        SegmentKey(hasher.finish())
    }
}

impl fmt::Display for SegmentKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for SegmentKey {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        u64::from_str_radix(s, 16).map(SegmentKey)
    }
}

// Keys travel as hex strings: JSON numbers lose precision past 2^53.
impl Serialize for SegmentKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Run {
    pub start: u32,
    pub length: u32,
}

/// A pixel set stored as maximal runs of consecutive row-major indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct RunLength {
    runs: Vec<Run>,
}

impl RunLength {
    /// Builds the encoding from pixel indices in any order; duplicates are ignored.
    pub fn from_pixels(pixels: impl IntoIterator<Item = usize>) -> Self {
        let mut sorted: Vec<usize> = pixels.into_iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        Self::from_sorted(&sorted)
    }

    fn from_sorted(sorted: &[usize]) -> Self {
        let mut runs: Vec<Run> = Vec::new();
        for &p in sorted {
            let p = p as u32;
            match runs.last_mut() {
                Some(run) if run.start + run.length == p => run.length += 1,
                _ => runs.push(Run {
                    start: p,
                    length: 1,
                }),
            }
        }
        RunLength { runs }
    }

    /// Accepts runs as stored on disk; they must be sorted, non-empty and non-touching.
    pub fn from_runs(runs: Vec<Run>) -> Option<Self> {
        let ok = runs.iter().all(|r| r.length > 0)
            && runs
                .windows(2)
                .all(|w| w[0].start as u64 + w[0].length as u64 <= w[1].start as u64);
        ok.then(|| {
            // Normalise touching runs so the encoding stays canonical.
            let pixels: Vec<usize> = runs
                .iter()
                .flat_map(|r| (r.start..r.start + r.length).map(|p| p as usize))
                .collect();
            Self::from_sorted(&pixels)
        })
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn pixel_count(&self) -> usize {
        self.runs.iter().map(|r| r.length as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn first(&self) -> Option<usize> {
        self.runs.first().map(|r| r.start as usize)
    }

    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.runs
            .iter()
            .flat_map(|r| (r.start..r.start + r.length).map(|p| p as usize))
    }

    pub fn contains(&self, pixel: usize) -> bool {
        let p = pixel as u32;
        match self.runs.binary_search_by(|r| r.start.cmp(&p)) {
            Ok(_) => true,
            Err(0) => false,
            Err(i) => {
                let r = self.runs[i - 1];
                p < r.start + r.length
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn runs_merge_consecutive_pixels() {
        let rl = RunLength::from_pixels([4, 2, 3, 9, 10, 3]);
        assert_eq!(
            rl.runs(),
            &[
                Run {
                    start: 2,
                    length: 3
                },
                Run {
                    start: 9,
                    length: 2
                }
            ]
        );
        assert_eq!(rl.pixel_count(), 5);
        assert!(rl.contains(4) && !rl.contains(5) && rl.contains(10) && !rl.contains(1));
    }

    #[test]
    fn key_depends_on_image_and_pixels() {
        let a = RunLength::from_pixels([0, 1, 2]);
        let b = RunLength::from_pixels([0, 1]);
        assert_ne!(SegmentKey::compute("img", &a), SegmentKey::compute("img", &b));
        assert_ne!(SegmentKey::compute("img", &a), SegmentKey::compute("img2", &a));
        assert_eq!(SegmentKey::compute("img", &a), SegmentKey::compute("img", &a.clone()));
    }

    #[test]
    fn key_hex_round_trip() {
        let k = SegmentKey(0x00ab_cdef_0123_4567);
        assert_eq!(k.to_string(), "00abcdef01234567");
        assert_eq!(k.to_string().parse::<SegmentKey>().unwrap(), k);
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<SegmentKey>(&json).unwrap(), k);
    }

    #[test]
    fn rejects_unsorted_runs() {
        let runs = vec![
            Run {
                start: 5,
                length: 2,
            },
            Run {
                start: 1,
                length: 1,
            },
        ];
        assert!(RunLength::from_runs(runs).is_none());
    }

    proptest! {
        #[test]
        fn pixels_round_trip(mut pixels in proptest::collection::vec(0usize..500, 0..80)) {
            let rl = RunLength::from_pixels(pixels.clone());
            pixels.sort_unstable();
            pixels.dedup();
            prop_assert_eq!(rl.pixels().collect::<Vec<_>>(), pixels.clone());
            prop_assert_eq!(RunLength::from_runs(rl.runs().to_vec()).unwrap(), rl);
        }
    }
}
