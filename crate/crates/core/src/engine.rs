//! Slot-vector evaluation engine.
//!
//! [`Backend`] is the primitive API every algorithm in this crate is written
//! against: encrypt, decrypt, slot-wise add and multiply, plaintext-mask
//! multiply and cyclic left rotation. [`SimEngine`] implements it with exact
//! `f64` arithmetic, tracks multiplicative depth per ciphertext and meters
//! every primitive call. Rescaling is modelled only as a depth increment.

use std::fmt;
use std::ops::Add;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Engine configuration. Only `slots` affects evaluation; the remaining
/// fields describe the CKKS parameter set a real backend would use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineParams {
    pub slots: usize,
    pub logq: u32,
    pub logn: u32,
    /// Scale exponent: the scale is `2^delta`.
    pub delta: u32,
    /// Constant-scale exponent: `2^delta_c`.
    pub delta_c: u32,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams { slots: 32768, logq: 1200, logn: 16, delta: 45, delta_c: 20 }
    }
}

impl EngineParams {
    /// Default parameters with a different slot count; `logn` follows as
    /// `log2(2 * slots)`.
    pub fn with_slots(slots: usize) -> Result<Self> {
        let params = EngineParams {
            slots,
            logn: (2 * slots.max(1)).trailing_zeros(),
            ..EngineParams::default()
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots < 2 || !self.slots.is_power_of_two() {
            return Err(Error::Params(format!(
                "slots must be a power of two >= 2, got {}",
                self.slots
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let params: EngineParams =
            toml::from_str(text).map_err(|e| Error::Params(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::input(path, e.to_string()))
    }
}

/// Layout metadata carried by a ciphertext. Purely descriptive: no primitive
/// inspects it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutTag {
    /// `rows x cols` matrix, row-major from slot 0.
    Matrix { rows: u32, cols: u32 },
    /// `rows` samples at row stride `stride`, each an `h x w` image prefix.
    Dataset { rows: u32, stride: u32, h: u32, w: u32 },
    /// One image column of height `h`, repeated for `batch` stacked images.
    ImageColumn { h: u32, batch: u32 },
}

/// An (exactly simulated) ciphertext: an immutable slot vector plus its
/// multiplicative depth.
#[derive(Clone, PartialEq)]
pub struct Ciphertext {
    slots: Vec<f64>,
    depth: usize,
    layout: Option<LayoutTag>,
}

impl Ciphertext {
    pub(crate) fn from_parts(slots: Vec<f64>, depth: usize, layout: Option<LayoutTag>) -> Self {
        Ciphertext { slots, depth, layout }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn layout(&self) -> Option<LayoutTag> {
        self.layout
    }

    pub fn with_layout(mut self, layout: LayoutTag) -> Self {
        self.layout = Some(layout);
        self
    }

    /// Raw slot access. In the simulator this is the "secret" plaintext; it
    /// is exposed for serialization only.
    pub fn raw_slots(&self) -> &[f64] {
        &self.slots
    }
}

impl fmt::Debug for Ciphertext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ciphertext")
            .field("slots", &self.slots.len())
            .field("depth", &self.depth)
            .field("layout", &self.layout)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskRole {
    /// Result-cleanup filter (0/1 only).
    Filter,
    /// Keeps the upper part of a block; zeroes rows that received wrapped data.
    KeepUpper,
    /// Keeps the lower part of a block that is refilled from elsewhere.
    KeepLower,
    /// Window-anchor selector used by the convolution summation.
    Anchor,
    /// Arbitrary plaintext constants.
    Constant,
}

impl MaskRole {
    fn is_binary(self) -> bool {
        !matches!(self, MaskRole::Constant)
    }
}

/// Plaintext vector multiplied into a ciphertext by [`Backend::cmul`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlainMask {
    values: Vec<f64>,
    role: MaskRole,
}

impl PlainMask {
    pub fn new(values: Vec<f64>, role: MaskRole) -> Result<Self> {
        if role.is_binary() {
            if let Some(pos) = values.iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::precondition(format!(
                    "{role:?} mask must be 0/1, found {} at slot {pos}",
                    values[pos]
                )));
            }
        }
        Ok(PlainMask { values, role })
    }

    /// 0/1 mask of length `slots` that is 1 exactly where `keep(slot)` holds.
    pub fn from_fn(slots: usize, role: MaskRole, keep: impl Fn(usize) -> bool) -> Self {
        let values = (0..slots).map(|s| if keep(s) { 1.0 } else { 0.0 }).collect();
        PlainMask { values, role }
    }

    pub fn constant(values: Vec<f64>) -> Self {
        PlainMask { values, role: MaskRole::Constant }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i)
    }
}

/// Primitive operation counters.
///
/// Merging sums the counters and takes the maximum depth, so it is
/// associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpMeter {
    pub add_count: u64,
    pub mul_count: u64,
    pub cmul_count: u64,
    pub rot_count: u64,
    pub enc_count: u64,
    pub max_depth: usize,
}

impl OpMeter {
    pub fn merge(&self, other: &OpMeter) -> OpMeter {
        OpMeter {
            add_count: self.add_count + other.add_count,
            mul_count: self.mul_count + other.mul_count,
            cmul_count: self.cmul_count + other.cmul_count,
            rot_count: self.rot_count + other.rot_count,
            enc_count: self.enc_count + other.enc_count,
            max_depth: self.max_depth.max(other.max_depth),
        }
    }

    /// Counter increments between an `earlier` snapshot and this one. The
    /// depth field is left as this snapshot's maximum.
    pub fn since(&self, earlier: &OpMeter) -> OpMeter {
        OpMeter {
            add_count: self.add_count - earlier.add_count,
            mul_count: self.mul_count - earlier.mul_count,
            cmul_count: self.cmul_count - earlier.cmul_count,
            rot_count: self.rot_count - earlier.rot_count,
            enc_count: self.enc_count - earlier.enc_count,
            max_depth: self.max_depth,
        }
    }

    /// True when the real-operation counts (everything but depth) agree.
    pub fn same_counts(&self, other: &OpMeter) -> bool {
        OpMeter { max_depth: 0, ..*self } == OpMeter { max_depth: 0, ..*other }
    }
}

impl Add for OpMeter {
    type Output = OpMeter;

    fn add(self, rhs: OpMeter) -> OpMeter {
        self.merge(&rhs)
    }
}

impl std::iter::Sum for OpMeter {
    fn sum<I: Iterator<Item = OpMeter>>(iter: I) -> OpMeter {
        iter.fold(OpMeter::default(), |acc, m| acc.merge(&m))
    }
}

/// The primitive homomorphic API.
///
/// `rot(ct, l)` rotates left: slot `i` of the result is slot `(i + l) mod
/// slots` of the input. Negative `l` rotates right.
pub trait Backend: Sync {
    type Ct: Clone + Send + Sync;

    fn slots(&self) -> usize;
    fn enc(&self, values: &[f64]) -> Result<Self::Ct>;
    fn dec(&self, ct: &Self::Ct) -> Vec<f64>;
    fn add(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct>;
    fn mul(&self, a: &Self::Ct, b: &Self::Ct) -> Result<Self::Ct>;
    fn cmul(&self, mask: &PlainMask, ct: &Self::Ct) -> Result<Self::Ct>;
    fn rot(&self, ct: &Self::Ct, l: i64) -> Self::Ct;
    fn depth(&self, ct: &Self::Ct) -> usize;
    fn meter_snapshot(&self) -> OpMeter;

    /// Attach layout metadata. Backends without metadata ignore it.
    fn retag(&self, ct: Self::Ct, _layout: LayoutTag) -> Self::Ct {
        ct
    }
}

#[derive(Debug, Default)]
struct AtomicMeter {
    add: AtomicU64,
    mul: AtomicU64,
    cmul: AtomicU64,
    rot: AtomicU64,
    enc: AtomicU64,
    max_depth: AtomicUsize,
}

impl AtomicMeter {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    fn depth(&self, depth: usize) {
        self.max_depth.fetch_max(depth, Ordering::Relaxed);
    }

    fn snapshot(&self) -> OpMeter {
        OpMeter {
            add_count: self.add.load(Ordering::Relaxed),
            mul_count: self.mul.load(Ordering::Relaxed),
            cmul_count: self.cmul.load(Ordering::Relaxed),
            rot_count: self.rot.load(Ordering::Relaxed),
            enc_count: self.enc.load(Ordering::Relaxed),
            max_depth: self.max_depth.load(Ordering::Relaxed),
        }
    }
}

/// Exact-arithmetic backend with shared, thread-safe metering.
#[derive(Debug)]
pub struct SimEngine {
    params: EngineParams,
    meter: AtomicMeter,
}

impl SimEngine {
    pub fn new(params: EngineParams) -> Result<Self> {
        params.validate()?;
        Ok(SimEngine { params, meter: AtomicMeter::default() })
    }

    pub fn with_slots(slots: usize) -> Result<Self> {
        Self::new(EngineParams::with_slots(slots)?)
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    fn check(&self, a: &Ciphertext, b: &Ciphertext) -> Result<()> {
        if a.slots.len() != b.slots.len() {
            return Err(Error::SlotMismatch { left: a.slots.len(), right: b.slots.len() });
        }
        if a.slots.len() != self.params.slots {
            return Err(Error::SlotMismatch { left: a.slots.len(), right: self.params.slots });
        }
        Ok(())
    }

    fn zip(&self, a: &Ciphertext, b: &Ciphertext, depth: usize, op: impl Fn(f64, f64) -> f64) -> Ciphertext {
        let slots = a.slots.iter().zip(&b.slots).map(|(&x, &y)| op(x, y)).collect();
        self.meter.depth(depth);
        Ciphertext { slots, depth, layout: a.layout.or(b.layout) }
    }

    /// Rebuild a ciphertext from stored slots (deserialization). Not metered.
    pub fn restore(&self, slots: Vec<f64>, depth: usize, layout: Option<LayoutTag>) -> Result<Ciphertext> {
        if slots.len() != self.params.slots {
            return Err(Error::SlotMismatch { left: slots.len(), right: self.params.slots });
        }
        Ok(Ciphertext { slots, depth, layout })
    }
}

impl Backend for SimEngine {
    type Ct = Ciphertext;

    fn slots(&self) -> usize {
        self.params.slots
    }

    fn enc(&self, values: &[f64]) -> Result<Ciphertext> {
        let n = self.params.slots;
        if values.len() > n {
            return Err(Error::Capacity { needed: values.len(), slots: n });
        }
        let mut slots = vec![0.0; n];
        slots[..values.len()].copy_from_slice(values);
        AtomicMeter::bump(&self.meter.enc);
        Ok(Ciphertext { slots, depth: 0, layout: None })
    }

    fn dec(&self, ct: &Ciphertext) -> Vec<f64> {
        ct.slots.clone()
    }

    fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a, b)?;
        AtomicMeter::bump(&self.meter.add);
        Ok(self.zip(a, b, a.depth.max(b.depth), |x, y| x + y))
    }

    fn mul(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.check(a, b)?;
        AtomicMeter::bump(&self.meter.mul);
        Ok(self.zip(a, b, a.depth.max(b.depth) + 1, |x, y| x * y))
    }

    fn cmul(&self, mask: &PlainMask, ct: &Ciphertext) -> Result<Ciphertext> {
        if mask.len() != ct.slots.len() {
            return Err(Error::SlotMismatch { left: mask.len(), right: ct.slots.len() });
        }
        AtomicMeter::bump(&self.meter.cmul);
        let depth = ct.depth + 1;
        self.meter.depth(depth);
        let slots = ct.slots.iter().zip(&mask.values).map(|(&x, &c)| x * c).collect();
        Ok(Ciphertext { slots, depth, layout: ct.layout })
    }

    fn rot(&self, ct: &Ciphertext, l: i64) -> Ciphertext {
        AtomicMeter::bump(&self.meter.rot);
        let n = ct.slots.len() as i64;
        let shift = l.rem_euclid(n) as usize;
        let mut slots = ct.slots.clone();
        slots.rotate_left(shift);
        Ciphertext { slots, depth: ct.depth, layout: ct.layout }
    }

    fn depth(&self, ct: &Ciphertext) -> usize {
        ct.depth
    }

    fn meter_snapshot(&self) -> OpMeter {
        self.meter.snapshot()
    }

    fn retag(&self, ct: Ciphertext, layout: LayoutTag) -> Ciphertext {
        ct.with_layout(layout)
    }
}
