//! Sparse 4D token sets.
//!
//! Every modality lives in one `(t, x, y, z)` grid: images on the `(x, y)`
//! plane at `t = z = 0`, videos along `t` with `z = 0`, and voxel assets in
//! `(x, y, z)` at `t = 0`. A [`TokenSet`] pairs each active coordinate with a
//! feature vector.
//!
//! Token order is lexicographic in `(t, x, y, z)` after [`canonicalize`].

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const ATOK_MAGIC: [u8; 4] = *b"ATOK";
/// Continuous token files.
pub const ATOK_VERSION: u32 = 1;
/// Discrete token files carry an extra `discrete` flag byte after the modality.
pub const ATOK_VERSION_DISCRETE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Coord4 {
    pub t: u32,
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl Coord4 {
    pub const fn new(t: u32, x: u32, y: u32, z: u32) -> Self {
        Self { t, x, y, z }
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.t, self.x, self.y, self.z]
    }

    pub fn from_array(a: [u32; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl fmt::Display for Coord4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.t, self.x, self.y, self.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Video,
    ThreeD,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Video => 1,
            Modality::ThreeD => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Image),
            1 => Some(Modality::Video),
            2 => Some(Modality::ThreeD),
            _ => None,
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            "3d" | "threed" => Ok(Modality::ThreeD),
            other => Err(Error::ConfigError(format!("unknown modality {other:?}"))),
        }
    }
}

/// A sparse set of `(coordinate, feature)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub modality: Modality,
    /// Grid bounds `(N_t, N_x, N_y, N_z)`.
    pub bounds: [u32; 4],
    pub channels: usize,
    pub coords: Vec<Coord4>,
    /// Row-major `len() x channels` features.
    pub features: Vec<f32>,
    /// Features hold integer codebook ids rather than continuous values.
    pub discrete: bool,
}

impl TokenSet {
    /// Builds a token set, checking shapes, bounds and finiteness. Order is
    /// left as given; call [`canonicalize`] to sort.
    pub fn new(
        modality: Modality,
        bounds: [u32; 4],
        channels: usize,
        coords: Vec<Coord4>,
        features: Vec<f32>,
    ) -> Result<Self> {
        let ts = Self {
            modality,
            bounds,
            channels,
            coords,
            features,
            discrete: false,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    fn validate(&self) -> Result<()> {
        if self.coords.is_empty() {
            return Err(Error::InvariantViolation("token set is empty".into()));
        }
        if self.bounds.contains(&0) {
            return Err(Error::InvariantViolation(format!(
                "bounds must be positive, got {:?}",
                self.bounds
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvariantViolation("zero channels".into()));
        }
        if self.features.len() != self.coords.len() * self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} features for {} tokens x {} channels",
                self.features.len(),
                self.coords.len(),
                self.channels
            )));
        }
        for c in &self.coords {
            let a = c.to_array();
            if a.iter().zip(self.bounds.iter()).any(|(v, b)| v >= b) {
                return Err(Error::InvariantViolation(format!(
                    "coordinate {c} outside bounds {:?}",
                    self.bounds
                )));
            }
        }
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvariantViolation(format!(
                "non-finite feature at index {i}"
            )));
        }
        Ok(())
    }
}

/// Sorts tokens by `(t, x, y, z)`. Fails on repeated coordinates.
pub fn canonicalize(ts: &TokenSet) -> Result<TokenSet> {
    let mut order: Vec<usize> = (0..ts.len()).collect();
    order.sort_by_key(|&i| ts.coords[i]);
    for w in order.windows(2) {
        if ts.coords[w[0]] == ts.coords[w[1]] {
            return Err(Error::DuplicateCoordinate(ts.coords[w[0]]));
        }
    }
    let mut features = Vec::with_capacity(ts.features.len());
    for &i in &order {
        features.extend_from_slice(ts.feature(i));
    }
    Ok(TokenSet {
        modality: ts.modality,
        bounds: ts.bounds,
        channels: ts.channels,
        coords: order.iter().map(|&i| ts.coords[i]).collect(),
        features,
        discrete: ts.discrete,
    })
}

/// Checks that every token sits in its modality's subspace.
pub fn check_subspace(ts: &TokenSet) -> Result<()> {
    for (index, &coord) in ts.coords.iter().enumerate() {
        let reason = match ts.modality {
            Modality::Image if coord.t != 0 => Some("t != 0"),
            Modality::Image if coord.z != 0 => Some("z != 0"),
            Modality::Video if coord.z != 0 => Some("z != 0"),
            Modality::ThreeD if coord.t != 0 => Some("t != 0"),
            _ => None,
        };
        if let Some(reason) = reason {
            return Err(Error::SubspaceViolation {
                index,
                coord,
                reason,
            });
        }
    }
    Ok(())
}

pub fn write_tokens<W: Write>(ts: &TokenSet, mut sink: W) -> Result<()> {
    let mut buf = Vec::with_capacity(41 + ts.len() * (16 + 4 * ts.channels));
    buf.extend_from_slice(&ATOK_MAGIC);
    let version = if ts.discrete {
        ATOK_VERSION_DISCRETE
    } else {
        ATOK_VERSION
    };
    buf.extend_from_slice(&version.to_le_bytes());
    buf.push(ts.modality.code());
    if ts.discrete {
        buf.push(1);
    }
    for b in ts.bounds {
        buf.extend_from_slice(&b.to_le_bytes());
    }
    buf.extend_from_slice(&(ts.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(ts.len() as u64).to_le_bytes());
    for i in 0..ts.len() {
        for c in ts.coords[i].to_array() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for v in ts.feature(i) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    sink.write_all(&buf)?;
    Ok(())
}

pub fn read_tokens<R: Read>(mut source: R) -> Result<TokenSet> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let mut r = ByteReader::new(&bytes);

    let magic = r.array::<4>("magic")?;
    if magic != ATOK_MAGIC {
        return Err(Error::BadMagic {
            expected: ATOK_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != ATOK_VERSION && version != ATOK_VERSION_DISCRETE {
        return Err(Error::UnsupportedVersion(version));
    }
    let code = r.u8("modality")?;
    let modality = Modality::from_code(code)
        .ok_or_else(|| Error::InvariantViolation(format!("unknown modality code {code}")))?;
    let discrete = if version == ATOK_VERSION_DISCRETE {
        match r.u8("discrete flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::InvariantViolation(format!("discrete flag {f}"))),
        }
    } else {
        false
    };
    let mut bounds = [0u32; 4];
    for b in &mut bounds {
        *b = r.u32("bounds")?;
    }
    let channels = r.u32("channels")? as usize;
    let len = r.u64("token count")?;

    let record = 16 + 4 * channels as u64;
    if (r.remaining() as u64) < len.saturating_mul(record) {
        return Err(Error::TruncatedStream(format!(
            "header declares {len} records of {record} bytes, {} bytes remain",
            r.remaining()
        )));
    }
    let len = len as usize;
    let mut coords = Vec::with_capacity(len);
    let mut features = Vec::with_capacity(len * channels);
    for _ in 0..len {
        let mut c = [0u32; 4];
        for v in &mut c {
            *v = r.u32("coordinate")?;
        }
        coords.push(Coord4::from_array(c));
        for _ in 0..channels {
            features.push(r.f32("feature")?);
        }
    }
    if r.remaining() != 0 {
        return Err(Error::InvariantViolation(format!(
            "{} trailing bytes after records",
            r.remaining()
        )));
    }

    let mut ts = TokenSet::new(modality, bounds, channels, coords, features)?;
    ts.discrete = discrete;
    canonicalize(&ts).map_err(|e| Error::InvariantViolation(e.to_string()))?;
    check_subspace(&ts).map_err(|e| Error::InvariantViolation(e.to_string()))?;
    Ok(ts)
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::TruncatedStream(format!(
                "need {n} bytes for {what}, {} remain",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N, what)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array::<4>(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array::<8>(what)?))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array::<4>(what)?))
    }
}
