use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Legal layer counts per block.
pub const LAYER_CHOICES: [u32; 5] = [1, 2, 3, 4, 5];
/// Legal first-layer filter lengths.
pub const FILTER_CHOICES: [u32; 5] = [10, 20, 40, 80, 160];
/// Legal weight bit-widths.
pub const BIT_CHOICES: [u32; 4] = [4, 8, 16, 32];

/// `(layers, first filter length, bit-width)` for one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[u32; 3]", into = "[u32; 3]")]
pub struct BlockSetting {
    pub layers: u32,
    pub filter_length: u32,
    pub bits: u32,
}

impl BlockSetting {
    pub const fn new(layers: u32, filter_length: u32, bits: u32) -> Self {
        BlockSetting {
            layers,
            filter_length,
            bits,
        }
    }

    /// Filter length of each layer: halved per layer, never below 1.
    pub fn layer_lengths(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|l| ((self.filter_length >> l) as usize).max(1))
            .collect()
    }

    fn is_legal(&self) -> bool {
        LAYER_CHOICES.contains(&self.layers)
            && FILTER_CHOICES.contains(&self.filter_length)
            && BIT_CHOICES.contains(&self.bits)
    }
}

impl From<[u32; 3]> for BlockSetting {
    fn from(v: [u32; 3]) -> Self {
        BlockSetting::new(v[0], v[1], v[2])
    }
}

impl From<BlockSetting> for [u32; 3] {
    fn from(b: BlockSetting) -> Self {
        [b.layers, b.filter_length, b.bits]
    }
}

/// Architecture and precision of a student, one entry per block.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StudentSetting {
    pub blocks: Vec<BlockSetting>,
}

impl StudentSetting {
    pub fn new(blocks: Vec<BlockSetting>) -> Result<Self> {
        let s = StudentSetting { blocks };
        s.validate()?;
        Ok(s)
    }

    /// The same block repeated `count` times.
    pub fn uniform(count: usize, block: BlockSetting) -> Result<Self> {
        Self::new(vec![block; count])
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidSetting("setting has no blocks".into()));
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if !b.is_legal() {
                return Err(Error::InvalidSetting(format!(
                    "block {j} = ({}, {}, {}): layers must be in {LAYER_CHOICES:?}, \
                     filter length in {FILTER_CHOICES:?}, bits in {BIT_CHOICES:?}",
                    b.layers, b.filter_length, b.bits
                )));
            }
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Raw `(L, F, W)` values of every block, flattened.
    pub fn raw_values(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| [b.layers as f64, b.filter_length as f64, b.bits as f64])
            .collect()
    }

    /// Compact JSON form, e.g. `[[3,40,8],[1,10,4]]`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("setting serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: StudentSetting = serde_json::from_str(text)
            .map_err(|e| Error::InvalidSetting(format!("{text:?}: {e}")))?;
        s.validate()?;
        Ok(s)
    }
}

impl fmt::Display for StudentSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_filter_lengths() {
        assert_eq!(BlockSetting::new(3, 40, 8).layer_lengths(), vec![40, 20, 10]);
        assert_eq!(BlockSetting::new(3, 20, 8).layer_lengths(), vec![20, 10, 5]);
        assert_eq!(BlockSetting::new(5, 10, 8).layer_lengths(), vec![10, 5, 2, 1, 1]);
    }

    #[test]
    fn json_round_trip() {
        let s = StudentSetting::new(vec![
            BlockSetting::new(3, 20, 8),
            BlockSetting::new(4, 40, 4),
            BlockSetting::new(2, 10, 16),
        ])
        .unwrap();
        assert_eq!(s.to_json(), "[[3,20,8],[4,40,4],[2,10,16]]");
        assert_eq!(StudentSetting::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn invalid_entry_names_the_block() {
        let err = StudentSetting::new(vec![BlockSetting::new(3, 40, 8), BlockSetting::new(6, 40, 8)])
            .unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
        assert!(StudentSetting::from_json("[[1,15,8]]").is_err());
        assert!(StudentSetting::new(vec![]).is_err());
    }
}
