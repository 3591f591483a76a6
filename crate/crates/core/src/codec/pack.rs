//! Bit-exact latent code serialization.
//!
//! Payload: each `index - 1` as a `log2(K)`-bit big-endian field, fields
//! concatenated most significant bit first and zero-padded to a byte
//! boundary. When `K` is not a power of two every index takes one byte.
//!
//! Code file layout (multi-byte integers little-endian):
//!
//! ```text
//! "VQDC" | version: u8 | K: u16 | N: u16 | packing: u8 | payload
//! ```

use std::path::Path;

use crate::codec::LatentCode;
use crate::error::{Error, Result};

pub const CODE_FILE_MAGIC: &[u8; 4] = b"VQDC";
pub const CODE_FILE_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Packing {
    BitPacked = 0,
    BytePerIndex = 1,
}

impl Packing {
    pub fn for_options(options: usize) -> Result<Self> {
        if options.is_power_of_two() {
            Ok(Packing::BitPacked)
        } else if options <= 256 {
            Ok(Packing::BytePerIndex)
        } else {
            Err(Error::InvalidArgument(format!(
                "K={options} is neither a power of two nor small enough for one byte per index"
            )))
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Packing::BitPacked),
            1 => Ok(Packing::BytePerIndex),
            other => Err(Error::Format(format!("unknown packing mode {other}"))),
        }
    }

    fn payload_len(self, options: usize, stages: usize) -> usize {
        match self {
            Packing::BitPacked => (stages * options.trailing_zeros() as usize).div_ceil(8),
            Packing::BytePerIndex => stages,
        }
    }
}

/// Packs the code payload, without any header.
pub fn pack_code(code: &LatentCode) -> Result<Vec<u8>> {
    let options = code.options();
    match Packing::for_options(options)? {
        Packing::BytePerIndex => Ok(code.indices().iter().map(|&c| (c - 1) as u8).collect()),
        Packing::BitPacked => {
            let width = options.trailing_zeros();
            let mut out =
                Vec::with_capacity(Packing::BitPacked.payload_len(options, code.stages()));
            let mut acc: u64 = 0;
            let mut filled = 0u32;
            for &c in code.indices() {
                acc = (acc << width) | (c as u64 - 1);
                filled += width;
                while filled >= 8 {
                    filled -= 8;
                    out.push((acc >> filled) as u8);
                    acc &= (1u64 << filled) - 1;
                }
            }
            if filled > 0 {
                out.push((acc << (8 - filled)) as u8);
            }
            Ok(out)
        }
    }
}

/// Exact inverse of [`pack_code`]. Rejects short or long buffers and
/// nonzero padding bits.
pub fn unpack_code(bytes: &[u8], stages: usize, options: usize) -> Result<LatentCode> {
    let packing = Packing::for_options(options)?;
    unpack_with(bytes, stages, options, packing)
}

fn unpack_with(
    bytes: &[u8],
    stages: usize,
    options: usize,
    packing: Packing,
) -> Result<LatentCode> {
    let expected = packing.payload_len(options, stages);
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "code payload truncated: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "code payload has {} trailing bytes",
            bytes.len() - expected
        )));
    }
    let indices = match packing {
        Packing::BytePerIndex => bytes.iter().map(|&b| b as usize + 1).collect(),
        Packing::BitPacked => {
            if !options.is_power_of_two() {
                return Err(Error::Format(format!(
                    "bit packing needs a power-of-two K, got {options}"
                )));
            }
            let width = options.trailing_zeros();
            let mut indices = Vec::with_capacity(stages);
            let mut acc: u64 = 0;
            let mut available = 0u32;
            let mut iter = bytes.iter();
            for _ in 0..stages {
                while available < width {
                    acc = (acc << 8) | *iter.next().expect("length checked") as u64;
                    available += 8;
                }
                available -= width;
                indices.push(((acc >> available) & ((1u64 << width) - 1)) as usize + 1);
                acc &= (1u64 << available) - 1;
            }
            if acc != 0 || iter.next().is_some_and(|&b| b != 0) {
                return Err(Error::Format("nonzero padding bits in code payload".into()));
            }
            indices
        }
    };
    LatentCode::new(options, indices).map_err(|e| Error::Format(e.to_string()))
}

/// Full code file bytes: header then payload.
pub fn encode_code_file(code: &LatentCode) -> Result<Vec<u8>> {
    let (options, stages) = (code.options(), code.stages());
    let k = u16::try_from(options)
        .map_err(|_| Error::InvalidArgument(format!("K={options} exceeds u16")))?;
    let n = u16::try_from(stages)
        .map_err(|_| Error::InvalidArgument(format!("N={stages} exceeds u16")))?;
    let packing = Packing::for_options(options)?;
    let mut out = Vec::with_capacity(HEADER_LEN + packing.payload_len(options, stages));
    out.extend_from_slice(CODE_FILE_MAGIC);
    out.push(CODE_FILE_VERSION);
    out.extend_from_slice(&k.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(packing as u8);
    out.extend_from_slice(&pack_code(code)?);
    Ok(out)
}

pub fn decode_code_file(bytes: &[u8]) -> Result<LatentCode> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "code file too short: {} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != CODE_FILE_MAGIC {
        return Err(Error::Format(format!(
            "bad code file magic {:02x?}",
            &bytes[..4]
        )));
    }
    if bytes[4] != CODE_FILE_VERSION {
        return Err(Error::Format(format!(
            "code file version {} (expected {CODE_FILE_VERSION})",
            bytes[4]
        )));
    }
    let options = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
    let stages = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
    let packing = Packing::from_byte(bytes[9])?;
    if options == 0 {
        return Err(Error::Format("code file declares K=0".into()));
    }
    if packing != Packing::for_options(options)? {
        return Err(Error::Format(format!(
            "packing mode {packing:?} is invalid for K={options}"
        )));
    }
    unpack_with(&bytes[HEADER_LEN..], stages, options, packing)
}

pub fn write_code_file(path: &Path, code: &LatentCode) -> Result<()> {
    let bytes = encode_code_file(code)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_code_file(path: &Path) -> Result<LatentCode> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_code_file(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(k: usize, idx: &[usize]) -> LatentCode {
        LatentCode::new(k, idx.to_vec()).unwrap()
    }

    #[test]
    fn sixty_bit_codes_take_eight_bytes() {
        let c = code(64, &[64, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(c.bits(), Some(60));
        let payload = pack_code(&c).unwrap();
        assert_eq!(payload.len(), 8);
        assert_eq!(unpack_code(&payload, 10, 64).unwrap(), c);
    }

    #[test]
    fn all_first_options_pack_to_zero() {
        assert_eq!(pack_code(&code(2, &[1, 1, 1])).unwrap(), vec![0x00]);
    }

    #[test]
    fn walkthrough_code_bits() {
        // 000000 000001 000100 | 000000 pad
        // -> 0000_0000 0001_0001 0000_0000
        let payload = pack_code(&code(64, &[1, 2, 5])).unwrap();
        assert_eq!(payload, vec![0x00, 0x11, 0x00]);
    }

    #[test]
    fn single_option_codes_are_empty() {
        let c = code(1, &[1, 1, 1, 1]);
        assert_eq!(c.bits(), Some(0));
        assert!(pack_code(&c).unwrap().is_empty());
        assert_eq!(unpack_code(&[], 4, 1).unwrap(), c);
    }

    #[test]
    fn truncated_and_padded_payloads_are_rejected() {
        let payload = pack_code(&code(64, &[1, 2, 5])).unwrap();
        assert!(matches!(
            unpack_code(&payload[..2], 3, 64),
            Err(Error::Format(_))
        ));
        let mut long = payload.clone();
        long.push(0);
        assert!(matches!(unpack_code(&long, 3, 64), Err(Error::Format(_))));
        let mut dirty = payload;
        dirty[2] |= 0x01;
        let err = unpack_code(&dirty, 3, 64).unwrap_err();
        assert!(err.to_string().contains("padding"), "{err}");
    }

    #[test]
    fn non_power_of_two_uses_a_byte_per_index() {
        let c = code(10, &[10, 1, 7]);
        assert_eq!(pack_code(&c).unwrap(), vec![9, 0, 6]);
        let file = encode_code_file(&c).unwrap();
        assert_eq!(file[9], Packing::BytePerIndex as u8);
        assert_eq!(decode_code_file(&file).unwrap(), c);
        assert!(unpack_code(&[10, 0, 0], 3, 10).is_err());
    }

    #[test]
    fn code_file_header_layout() {
        let c = code(64, &[1, 2, 5]);
        let file = encode_code_file(&c).unwrap();
        assert_eq!(&file[..4], b"VQDC");
        assert_eq!(file[4], 1);
        assert_eq!(&file[5..7], &[64, 0]);
        assert_eq!(&file[7..9], &[3, 0]);
        assert_eq!(file[9], 0);
        assert_eq!(&file[10..], &[0x00, 0x11, 0x00]);
        let mut bad = file.clone();
        bad[0] = b'X';
        assert!(decode_code_file(&bad).is_err());
        assert!(decode_code_file(&file[..file.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(log_k in 0u32..=12, raw in proptest::collection::vec(any::<u32>(), 1..200)) {
            let k = 1usize << log_k;
            let c = LatentCode::new(k, raw.iter().map(|&r| r as usize % k + 1).collect()).unwrap();
            let payload = pack_code(&c).unwrap();
            prop_assert_eq!(payload.len(), (c.stages() * log_k as usize).div_ceil(8));
            prop_assert_eq!(unpack_code(&payload, c.stages(), k).unwrap(), c.clone());
            prop_assert_eq!(decode_code_file(&encode_code_file(&c).unwrap()).unwrap(), c);
        }

        #[test]
        fn byte_packing_round_trip(k in 3usize..=256, raw in proptest::collection::vec(any::<u32>(), 1..50)) {
            prop_assume!(!k.is_power_of_two());
            let c = LatentCode::new(k, raw.iter().map(|&r| r as usize % k + 1).collect()).unwrap();
            prop_assert_eq!(unpack_code(&pack_code(&c).unwrap(), c.stages(), k).unwrap(), c);
        }
    }
}
