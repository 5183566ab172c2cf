//! Declarative model of the target tiled array.
//!
//! Defaults describe a VE2802-class AIE-ML device: a 38 x 8 grid of vector
//! engines with 64 KB of local data memory each, 512 KB memory tiles with
//! six input and six output stream ports, and a 38-column cascade limit.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ElemType;

/// Column/row position of an engine in the array.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Coord {
    pub col: u32,
    pub row: u32,
}

impl Coord {
    pub const fn new(col: u32, row: u32) -> Self {
        Self { col, row }
    }

    pub fn manhattan(self, other: Coord) -> u64 {
        (self.col.abs_diff(other.col) + self.row.abs_diff(other.row)) as u64
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.col, self.row)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSpec {
    pub columns: u32,
    pub rows: u32,
    /// Local data memory per engine, in bytes.
    pub aie_local_mem: u64,
    pub aie_mem_banks: u32,
    pub memtile_capacity: u64,
    pub memtile_banks: u32,
    pub memtile_in_ports: u32,
    pub memtile_out_ports: u32,
    /// Size of the memory-tile pool. Derived from reported utilization
    /// (11 tiles at 14%), not from a datasheet.
    pub memtile_total: u32,
    /// Size of the GMIO channel pool (17 channels at 35%).
    pub gmio_total: u32,
    pub cascade_max_length: u32,
    pub macs_per_cycle: BTreeMap<ElemType, u32>,
    /// Stream channels per grid edge, per direction.
    pub stream_channels_per_edge: u32,
    pub clock_hz: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self::ve2802()
    }
}

impl ArchSpec {
    pub fn ve2802() -> Self {
        let macs_per_cycle = BTreeMap::from([
            (ElemType::F32, 32),
            (ElemType::Bf16, 128),
            (ElemType::Int8, 256),
        ]);
        Self {
            columns: 38,
            rows: 8,
            aie_local_mem: 64 * 1024,
            aie_mem_banks: 4,
            memtile_capacity: 512 * 1024,
            memtile_banks: 16,
            memtile_in_ports: 6,
            memtile_out_ports: 6,
            memtile_total: 76,
            gmio_total: 48,
            cascade_max_length: 38,
            macs_per_cycle,
            stream_channels_per_edge: 6,
            clock_hz: 1.25e9,
        }
    }

    /// Parse a TOML architecture document; missing fields take VE2802 defaults.
    pub fn from_toml(doc: &str) -> Result<Self> {
        let arch: ArchSpec = toml::from_str(doc).map_err(|e| Error::Parse(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&doc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("ArchSpec is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, u64); 13] = [
            ("columns", self.columns as u64),
            ("rows", self.rows as u64),
            ("aie_local_mem", self.aie_local_mem),
            ("aie_mem_banks", self.aie_mem_banks as u64),
            ("memtile_capacity", self.memtile_capacity),
            ("memtile_banks", self.memtile_banks as u64),
            ("memtile_in_ports", self.memtile_in_ports as u64),
            ("memtile_out_ports", self.memtile_out_ports as u64),
            ("memtile_total", self.memtile_total as u64),
            ("gmio_total", self.gmio_total as u64),
            ("cascade_max_length", self.cascade_max_length as u64),
            ("stream_channels_per_edge", self.stream_channels_per_edge as u64),
            ("macs_per_cycle", self.macs_per_cycle.len() as u64),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::InvalidArch {
                    field,
                    reason: "must be strictly positive".into(),
                });
            }
        }
        if self.macs_per_cycle.values().any(|&m| m == 0) {
            return Err(Error::InvalidArch {
                field: "macs_per_cycle",
                reason: "every rate must be strictly positive".into(),
            });
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(Error::InvalidArch {
                field: "clock_hz",
                reason: "must be finite and strictly positive".into(),
            });
        }
        if self.cascade_max_length > self.columns {
            return Err(Error::InvalidArch {
                field: "cascade_max_length",
                reason: format!(
                    "cascade length {} exceeds column count {}",
                    self.cascade_max_length, self.columns
                ),
            });
        }
        Ok(())
    }

    pub fn engine_count(&self) -> u32 {
        self.columns * self.rows
    }

    pub fn contains(&self, c: Coord) -> bool {
        c.col < self.columns && c.row < self.rows
    }

    pub fn macs_per_cycle(&self, etype: ElemType) -> Result<u32> {
        self.macs_per_cycle
            .get(&etype)
            .copied()
            .ok_or(Error::UnsupportedElemType {
                etype,
                context: "architecture datapath".into(),
            })
    }

    /// The N/S/E/W neighbours of `tile`, clipped at the grid border.
    pub fn tile_neighbors(&self, tile: Coord) -> Result<Vec<Coord>> {
        if !self.contains(tile) {
            return Err(Error::OutOfGrid {
                coord: tile,
                columns: self.columns,
                rows: self.rows,
            });
        }
        let mut out = Vec::with_capacity(4);
        if tile.col + 1 < self.columns {
            out.push(Coord::new(tile.col + 1, tile.row));
        }
        if tile.col > 0 {
            out.push(Coord::new(tile.col - 1, tile.row));
        }
        if tile.row + 1 < self.rows {
            out.push(Coord::new(tile.col, tile.row + 1));
        }
        if tile.row > 0 {
            out.push(Coord::new(tile.col, tile.row - 1));
        }
        Ok(out)
    }
}

/// Integer percentage with round-half-up, as used in utilization tables.
pub fn percent(used: u64, total: u64) -> u32 {
    if total == 0 {
        return 0;
    }
    ((used * 200 + total) / (total * 2)) as u32
}
