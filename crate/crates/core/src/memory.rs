//! Two-tier memory model: a small SRAM tier with hard capacity and an HBM
//! tier whose word traffic is counted.
//!
//! The model is observational. Kernels keep their own buffers and report
//! every tile movement to an [`Arena`]; the arena enforces SRAM capacity and
//! tallies HBM reads and writes into a [`TrafficLedger`]. Traffic is counted
//! in scalar words. Weights are charged on every tile load (no caching).

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// 256 KiB of FP32 words.
pub const DEFAULT_SRAM_WORDS: usize = 65_536;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TierConfig {
    pub sram_capacity_words: usize,
    pub word_size_bytes: usize,
}

impl Default for TierConfig {
    fn default() -> Self {
        TierConfig { sram_capacity_words: DEFAULT_SRAM_WORDS, word_size_bytes: 4 }
    }
}

impl TierConfig {
    pub fn with_capacity(sram_capacity_words: usize) -> Result<Self> {
        if sram_capacity_words == 0 {
            return Err(Error::InvalidParameter("sram_capacity_words must be > 0".into()));
        }
        Ok(TierConfig { sram_capacity_words, word_size_bytes: 4 })
    }
}

/// Word counters for one kernel execution.
///
/// `intermediate_*` fields track activations a kernel writes to HBM only to
/// read them back later (materialized scores, hidden activations), separately
/// from operand and output traffic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    pub kernel_label: String,
    pub hbm_words_read: u64,
    pub hbm_words_written: u64,
    pub sram_peak_words: u64,
    pub intermediate_words_read: u64,
    pub intermediate_words_written: u64,
    pub hbm_intermediate_peak_words: u64,
    pub flops: u64,
}

pub const LEDGER_CSV_HEADER: &str = "kernel_label,hbm_words_read,hbm_words_written,sram_peak_words";

impl TrafficLedger {
    pub fn new(label: impl Into<String>) -> Self {
        TrafficLedger { kernel_label: label.into(), ..Default::default() }
    }

    /// Folds the ledger of a sibling program block into this one. Counters
    /// add; peaks take the maximum since blocks run one after another.
    pub fn merge(&mut self, other: &TrafficLedger) {
        self.hbm_words_read += other.hbm_words_read;
        self.hbm_words_written += other.hbm_words_written;
        self.sram_peak_words = self.sram_peak_words.max(other.sram_peak_words);
        self.intermediate_words_read += other.intermediate_words_read;
        self.intermediate_words_written += other.intermediate_words_written;
        self.hbm_intermediate_peak_words =
            self.hbm_intermediate_peak_words.max(other.hbm_intermediate_peak_words);
        self.flops += other.flops;
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.kernel_label, self.hbm_words_read, self.hbm_words_written, self.sram_peak_words
        )
    }

    pub fn intermediate_traffic(&self) -> u64 {
        self.intermediate_words_read + self.intermediate_words_written
    }
}

pub fn write_ledger_csv<W: Write>(mut out: W, ledgers: &[TrafficLedger]) -> std::io::Result<()> {
    writeln!(out, "{LEDGER_CSV_HEADER}")?;
    for l in ledgers {
        writeln!(out, "{}", l.csv_row())?;
    }
    Ok(())
}

/// A live SRAM allocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileHandle {
    id: u64,
    words: usize,
}

impl TileHandle {
    pub fn words(&self) -> usize {
        self.words
    }
}

/// A live intermediate buffer in HBM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HbmBuffer {
    id: u64,
    words: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Operand,
    Intermediate,
}

#[derive(Debug)]
pub struct Arena {
    config: TierConfig,
    ledger: TrafficLedger,
    live_tiles: BTreeMap<u64, (String, usize)>,
    occupancy: usize,
    hbm_live: BTreeMap<u64, usize>,
    hbm_occupancy: usize,
    next_id: u64,
}

impl Arena {
    pub fn new(config: TierConfig, kernel_label: impl Into<String>) -> Self {
        Arena {
            config,
            ledger: TrafficLedger::new(kernel_label),
            live_tiles: BTreeMap::new(),
            occupancy: 0,
            hbm_live: BTreeMap::new(),
            hbm_occupancy: 0,
            next_id: 0,
        }
    }

    /// Arena with effectively unlimited SRAM, for running kernels whose
    /// traffic is not of interest.
    pub fn unbounded(kernel_label: impl Into<String>) -> Self {
        Arena::new(
            TierConfig { sram_capacity_words: usize::MAX / 2, word_size_bytes: 4 },
            kernel_label,
        )
    }

    pub fn config(&self) -> &TierConfig {
        &self.config
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn live_tile_count(&self) -> usize {
        self.live_tiles.len()
    }

    /// Starts a new kernel on this arena: returns the finished ledger and
    /// resets counters. Live tiles must have been freed.
    pub fn take_ledger(&mut self, next_label: impl Into<String>) -> TrafficLedger {
        debug_assert!(self.live_tiles.is_empty(), "tiles leaked: {:?}", self.live_tiles);
        std::mem::replace(&mut self.ledger, TrafficLedger::new(next_label))
    }

    pub fn into_ledger(self) -> TrafficLedger {
        self.ledger
    }

    fn allocate(&mut self, label: &str, words: usize) -> Result<TileHandle> {
        if self.occupancy + words > self.config.sram_capacity_words {
            return Err(Error::SramOverflow {
                kernel: self.ledger.kernel_label.clone(),
                tile: label.to_string(),
                requested: words,
                occupied: self.occupancy,
                capacity: self.config.sram_capacity_words,
            });
        }
        let id = self.next_id;
        self.next_id += 1;
        self.live_tiles.insert(id, (label.to_string(), words));
        self.occupancy += words;
        self.ledger.sram_peak_words = self.ledger.sram_peak_words.max(self.occupancy as u64);
        Ok(TileHandle { id, words })
    }

    fn check_live(&self, handle: TileHandle) -> Result<()> {
        if self.live_tiles.contains_key(&handle.id) {
            Ok(())
        } else {
            Err(Error::StaleHandle { kernel: self.ledger.kernel_label.clone(), handle: handle.id })
        }
    }

    fn count_read(&mut self, words: usize, class: Class) {
        self.ledger.hbm_words_read += words as u64;
        if class == Class::Intermediate {
            self.ledger.intermediate_words_read += words as u64;
        }
    }

    fn count_write(&mut self, words: usize, class: Class) {
        self.ledger.hbm_words_written += words as u64;
        if class == Class::Intermediate {
            self.ledger.intermediate_words_written += words as u64;
        }
    }

    /// Charges `words` HBM reads and reserves the same amount of SRAM.
    pub fn load_words(&mut self, label: &str, words: usize) -> Result<TileHandle> {
        let h = self.allocate(label, words)?;
        self.count_read(words, Class::Operand);
        Ok(h)
    }

    /// Copies `src` into an SRAM tile.
    pub fn load_tile<T: Copy>(&mut self, label: &str, src: &[T]) -> Result<(TileHandle, Vec<T>)> {
        let h = self.load_words(label, src.len())?;
        Ok((h, src.to_vec()))
    }

    /// Like [`Arena::load_words`] for data that a previous kernel
    /// materialized as an intermediate.
    pub fn load_intermediate_words(&mut self, label: &str, words: usize) -> Result<TileHandle> {
        let h = self.allocate(label, words)?;
        self.count_read(words, Class::Intermediate);
        Ok(h)
    }

    /// On-chip working memory that is not loaded from HBM.
    pub fn scratch(&mut self, label: &str, words: usize) -> Result<TileHandle> {
        self.allocate(label, words)
    }

    /// Write-through store of a live tile's contents to `dst`.
    pub fn store_tile<T: Copy>(&mut self, handle: TileHandle, src: &[T], dst: &mut [T]) -> Result<()> {
        self.check_live(handle)?;
        if src.len() != dst.len() {
            return Err(Error::Shape(format!(
                "store_tile: tile has {} words, destination {}",
                src.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(src);
        self.count_write(src.len(), Class::Operand);
        Ok(())
    }

    /// Charges a store of `words` from a live tile without moving data.
    pub fn store_words(&mut self, handle: TileHandle, words: usize) -> Result<()> {
        self.check_live(handle)?;
        self.count_write(words, Class::Operand);
        Ok(())
    }

    /// [`Arena::store_tile`] for an intermediate that a later kernel reads.
    pub fn store_intermediate_tile<T: Copy>(&mut self, handle: TileHandle, src: &[T], dst: &mut [T]) -> Result<()> {
        self.check_live(handle)?;
        if src.len() != dst.len() {
            return Err(Error::Shape(format!(
                "store_intermediate_tile: tile has {} words, destination {}",
                src.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(src);
        self.count_write(src.len(), Class::Intermediate);
        Ok(())
    }

    pub fn store_intermediate_words(&mut self, handle: TileHandle, words: usize) -> Result<()> {
        self.check_live(handle)?;
        self.count_write(words, Class::Intermediate);
        Ok(())
    }

    /// Read-modify-write `dst += src`, charged as `words` reads plus `words`
    /// writes.
    pub fn atomic_accumulate<T: Scalar>(
        &mut self,
        handle: TileHandle,
        src: &[T],
        dst: &mut [T],
    ) -> Result<()> {
        self.check_live(handle)?;
        if src.len() != dst.len() {
            return Err(Error::Shape(format!(
                "atomic_accumulate: tile has {} words, destination {}",
                src.len(),
                dst.len()
            )));
        }
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
        self.count_read(src.len(), Class::Operand);
        self.count_write(src.len(), Class::Operand);
        Ok(())
    }

    /// Scattered read-modify-write: `dst[offsets[i]] += src[i]`.
    pub fn atomic_scatter_add<T: Scalar>(
        &mut self,
        handle: TileHandle,
        src: &[T],
        dst: &mut [T],
        offsets: &[usize],
    ) -> Result<()> {
        self.check_live(handle)?;
        if src.len() != offsets.len() {
            return Err(Error::Shape(format!(
                "atomic_scatter_add: {} values for {} offsets",
                src.len(),
                offsets.len()
            )));
        }
        for (&o, &s) in offsets.iter().zip(src) {
            if o >= dst.len() {
                return Err(Error::IndexOutOfRange { index: o, bound: dst.len() });
            }
            dst[o] += s;
        }
        self.count_read(src.len(), Class::Operand);
        self.count_write(src.len(), Class::Operand);
        Ok(())
    }

    pub fn free(&mut self, handle: TileHandle) -> Result<()> {
        match self.live_tiles.remove(&handle.id) {
            Some((_, words)) => {
                self.occupancy -= words;
                Ok(())
            }
            None => Err(Error::StaleHandle {
                kernel: self.ledger.kernel_label.clone(),
                handle: handle.id,
            }),
        }
    }

    /// Reserves an intermediate activation buffer in HBM.
    pub fn hbm_alloc(&mut self, words: usize) -> HbmBuffer {
        let id = self.next_id;
        self.next_id += 1;
        self.hbm_live.insert(id, words);
        self.hbm_occupancy += words;
        self.ledger.hbm_intermediate_peak_words =
            self.ledger.hbm_intermediate_peak_words.max(self.hbm_occupancy as u64);
        HbmBuffer { id, words }
    }

    pub fn hbm_free(&mut self, buf: HbmBuffer) {
        if self.hbm_live.remove(&buf.id).is_some() {
            self.hbm_occupancy -= buf.words;
        }
    }

    pub fn add_flops(&mut self, flops: u64) {
        self.ledger.flops += flops;
    }
}
