//! Simulated secure aggregation with cancelling pairwise masks.
//!
//! Bundles are encoded on a fixed-point grid (scale `2^20`) into signed
//! 64-bit lanes. For every ordered roster pair `(i, j)` with `i < j`, a
//! pseudorandom mask stream derived from `(round_seed, i, j)` is added by
//! client `i` and subtracted by client `j`; all arithmetic wraps, so once
//! every roster member has contributed the masks cancel identically and the
//! lane sums equal the sums of the encoded inputs, with zero error on the
//! grid. Float masking cannot offer that guarantee, which is why floats are
//! quantized first.
//!
//! Lane 0 is a checksum: a known zero, encoded and masked like everything
//! else. If any contributor is missing or duplicated its masks stay in the
//! sum and the checksum lane is nonzero with overwhelming probability, which
//! is how dropouts are detected. No recovery protocol is attempted.
//!
//! The mask PRG stands in for pairwise secrets that a deployment would derive
//! via key agreement; simulating that exchange is out of scope.

use crate::datamodel::MomentBundle;
use crate::error::{Error, Result};
use crate::prng;
use crate::wire::{
    bundle_from_scalars, bundle_scalars, read_bundle_header, write_bundle_header, BundleHeader,
    ByteReader, ByteWriter, MASKED_MAGIC,
};

/// Fractional bits of the fixed-point encoding.
pub const FIXED_POINT_BITS: u32 = 20;
const SCALE: f64 = (1u64 << FIXED_POINT_BITS) as f64;

/// Encode one scalar onto the fixed-point grid.
#[inline]
pub fn encode_fixed(x: f64) -> i64 {
    (x * SCALE).round() as i64
}

/// Decode one fixed-point lane.
#[inline]
pub fn decode_fixed(v: i64) -> f64 {
    v as f64 / SCALE
}

/// Round every float field of a bundle to the fixed-point grid. This is the
/// value the protocol actually transports; tests use it as the exactness
/// reference.
pub fn quantize_bundle(bundle: &MomentBundle) -> MomentBundle {
    let header = BundleHeader::of(bundle);
    let scalars: Vec<f64> = bundle_scalars(bundle)
        .into_iter()
        .map(|x| decode_fixed(encode_fixed(x)))
        .collect();
    bundle_from_scalars(&header, &scalars).expect("shape preserved")
}

/// A client's bundle after masking, or a wrapping sum of such messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBundle {
    header: BundleHeader,
    round_id: u64,
    /// Sorted ids of the clients whose messages are folded into `lanes`.
    contributors: Vec<u32>,
    /// Lane 0 is the checksum; the rest follow the bundle scalar layout.
    lanes: Vec<i64>,
}

impl MaskedBundle {
    pub fn round_id(&self) -> u64 {
        self.round_id
    }

    pub fn contributors(&self) -> &[u32] {
        &self.contributors
    }

    pub fn lanes(&self) -> &[i64] {
        &self.lanes
    }

    /// Fold another masked message into this one (wrapping lane sums).
    pub fn combine(&self, other: &MaskedBundle) -> Result<MaskedBundle> {
        if self.header != other.header {
            return Err(Error::FieldMismatch("masked bundle headers differ".into()));
        }
        if self.round_id != other.round_id {
            return Err(Error::InvalidParameter(format!(
                "round mismatch: {} vs {}",
                self.round_id, other.round_id
            )));
        }
        if other.contributors.iter().any(|c| self.contributors.contains(c)) {
            return Err(Error::InvalidParameter(
                "a client contributed more than once".into(),
            ));
        }
        let mut contributors = self.contributors.clone();
        contributors.extend_from_slice(&other.contributors);
        contributors.sort_unstable();
        let lanes = self
            .lanes
            .iter()
            .zip(&other.lanes)
            .map(|(a, b)| a.wrapping_add(*b))
            .collect();
        Ok(MaskedBundle {
            header: self.header,
            round_id: self.round_id,
            contributors,
            lanes,
        })
    }

    /// Serialize as a `GHS1` frame.
    pub fn to_frame(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.magic(MASKED_MAGIC);
        w.u64(self.round_id);
        w.u32(self.contributors.len() as u32);
        for &c in &self.contributors {
            w.u32(c);
        }
        write_bundle_header(&mut w, &self.header);
        for &l in &self.lanes {
            w.i64(l);
        }
        w.finish()
    }

    /// Parse a `GHS1` frame.
    pub fn from_frame(bytes: &[u8]) -> Result<MaskedBundle> {
        let mut r = ByteReader::new(bytes);
        r.magic(MASKED_MAGIC)?;
        let round_id = r.u64()?;
        let n_contrib = r.u32()? as usize;
        let mut contributors = Vec::with_capacity(n_contrib);
        for _ in 0..n_contrib {
            contributors.push(r.u32()?);
        }
        let header = read_bundle_header(&mut r)?;
        let n_lanes = header.scalar_count() + 1;
        let mut lanes = Vec::with_capacity(n_lanes);
        for _ in 0..n_lanes {
            lanes.push(r.i64()?);
        }
        r.done()?;
        Ok(MaskedBundle {
            header,
            round_id,
            contributors,
            lanes,
        })
    }
}

fn pair_stream(round_seed: u64, low: u32, high: u32) -> u64 {
    prng::split(prng::split(round_seed, low as u64), high as u64)
}

fn check_roster(roster: &[u32]) -> Result<()> {
    if roster.is_empty() {
        return Err(Error::EmptyInput("empty roster".into()));
    }
    if roster.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter(
            "roster must be strictly sorted".into(),
        ));
    }
    Ok(())
}

/// Mask a client's bundle for one aggregation round.
pub fn mask(
    bundle: &MomentBundle,
    client_id: u32,
    roster: &[u32],
    round_seed: u64,
) -> Result<MaskedBundle> {
    check_roster(roster)?;
    if !roster.contains(&client_id) {
        return Err(Error::NotInRoster { client_id });
    }
    let header = BundleHeader::of(bundle);
    let mut lanes: Vec<i64> = Vec::with_capacity(header.scalar_count() + 1);
    lanes.push(encode_fixed(0.0)); // checksum
    lanes.extend(bundle_scalars(bundle).into_iter().map(encode_fixed));
    for &peer in roster {
        if peer == client_id {
            continue;
        }
        let (low, high, sign) = if client_id < peer {
            (client_id, peer, 1i64)
        } else {
            (peer, client_id, -1i64)
        };
        let stream = pair_stream(round_seed, low, high);
        for (t, lane) in lanes.iter_mut().enumerate() {
            let m = prng::word(stream, t as u64) as i64;
            *lane = if sign > 0 {
                lane.wrapping_add(m)
            } else {
                lane.wrapping_sub(m)
            };
        }
    }
    Ok(MaskedBundle {
        header,
        round_id: round_seed,
        contributors: vec![client_id],
        lanes,
    })
}

/// Recover the aggregate bundle from the wrapping sum of every roster
/// member's masked message.
pub fn unseal(sum: &MaskedBundle, roster: &[u32]) -> Result<MomentBundle> {
    check_roster(roster)?;
    if sum.lanes[0] != 0 {
        return Err(Error::ChecksumMismatch {
            round_id: sum.round_id,
        });
    }
    if sum.contributors != roster {
        return Err(Error::InvalidParameter(format!(
            "contributors {:?} do not match roster {:?}",
            sum.contributors, roster
        )));
    }
    let scalars: Vec<f64> = sum.lanes[1..].iter().map(|&l| decode_fixed(l)).collect();
    bundle_from_scalars(&sum.header, &scalars)
}

/// Mask every bundle, fold the messages, and unseal: the full simulated
/// round. Bundle `i` belongs to `roster[i]`.
pub fn aggregate_round(
    bundles: &[MomentBundle],
    roster: &[u32],
    round_seed: u64,
) -> Result<MomentBundle> {
    check_roster(roster)?;
    if bundles.len() != roster.len() {
        return Err(Error::InvalidParameter(format!(
            "{} bundles for {} roster members",
            bundles.len(),
            roster.len()
        )));
    }
    let mut folded: Option<MaskedBundle> = None;
    for (bundle, &client) in bundles.iter().zip(roster) {
        let m = mask(bundle, client, roster, round_seed)?;
        folded = Some(match folded {
            None => m,
            Some(acc) => acc.combine(&m)?,
        });
    }
    unseal(&folded.expect("roster nonempty"), roster)
}
