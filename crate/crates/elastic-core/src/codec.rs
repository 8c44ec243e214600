//! Shared bit layout for submodel encodings.
//!
//! The evolutionary search and the budget router speak the same language: a
//! flat bit string (search: genome bits; router: thresholded gates) decoded
//! by *population count* per field, so every bit carries equal weight and
//! flipping any one of them moves the decoded value by at most one grid
//! step. Layout:
//!
//! ```text
//! [ k_max emb bits ]
//! [ layer 0: r_max_steps ratio bits | h_max head bits ]
//!   …
//! [ layer L−1: ratio bits | head bits ]
//! [ L attention flags ][ L MLP flags ]
//! ```
//!
//! Decoding clamps each popcount into the elastic floor/ceiling of its
//! axis, so *every* bit string decodes to a valid configuration — there are
//! no lethal genomes and no invalid router outputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::backbone::{BackboneSpec, SubmodelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ConfigCodec {
    spec: BackboneSpec,
}

impl ConfigCodec {
    pub fn new(spec: &BackboneSpec) -> Self {
        ConfigCodec { spec: spec.clone() }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Total bit-string length.
    pub fn len(&self) -> usize {
        let s = &self.spec;
        s.k_max() + s.layers * (s.r_max_steps() + s.h_max()) + 2 * s.layers
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn emb_bits(&self) -> Range<usize> {
        0..self.spec.k_max()
    }

    fn layer_base(&self, l: usize) -> usize {
        self.spec.k_max() + l * (self.spec.r_max_steps() + self.spec.h_max())
    }

    pub fn ratio_bits(&self, l: usize) -> Range<usize> {
        let b = self.layer_base(l);
        b..b + self.spec.r_max_steps()
    }

    pub fn head_bits(&self, l: usize) -> Range<usize> {
        let b = self.layer_base(l) + self.spec.r_max_steps();
        b..b + self.spec.h_max()
    }

    pub fn mha_bit(&self, l: usize) -> usize {
        self.layer_base(self.spec.layers) + l
    }

    pub fn mlp_bit(&self, l: usize) -> usize {
        self.layer_base(self.spec.layers) + self.spec.layers + l
    }

    fn popcount(bits: &[bool], range: Range<usize>) -> usize {
        bits[range].iter().filter(|&&b| b).count()
    }

    /// Decode any bit string of the right length into a valid submodel.
    pub fn decode(&self, bits: &[bool]) -> Result<SubmodelConfig> {
        if bits.len() != self.len() {
            return Err(Error::Input(alloc::format!(
                "codec: bit string length {} != {}",
                bits.len(),
                self.len()
            )));
        }
        let s = &self.spec;
        let k = Self::popcount(bits, self.emb_bits()).clamp(s.k_min(), s.k_max());
        let mut r = Vec::with_capacity(s.layers);
        let mut h = Vec::with_capacity(s.layers);
        let mut mha = Vec::with_capacity(s.layers);
        let mut mlp = Vec::with_capacity(s.layers);
        let r_lo = s.r_min_steps().max(1);
        for l in 0..s.layers {
            let rc = Self::popcount(bits, self.ratio_bits(l)).clamp(r_lo, s.r_max_steps());
            r.push(rc as f64 * s.r_step);
            h.push(Self::popcount(bits, self.head_bits(l)).clamp(s.h_min, s.h_max()));
            mha.push(bits[self.mha_bit(l)]);
            mlp.push(bits[self.mlp_bit(l)]);
        }
        Ok(SubmodelConfig {
            e: k * s.d_head,
            r,
            h,
            mha,
            mlp,
        })
    }

    /// Canonical (prefix-ones) encoding of a valid configuration. Decoding
    /// the result reproduces the configuration exactly.
    pub fn encode_canonical(&self, cfg: &SubmodelConfig) -> Result<Vec<bool>> {
        cfg.validate(&self.spec)?;
        let s = &self.spec;
        let mut bits = vec![false; self.len()];
        let set_prefix = |bits: &mut [bool], range: Range<usize>, count: usize| {
            for i in range.take(count) {
                bits[i] = true;
            }
        };
        set_prefix(&mut bits, self.emb_bits(), cfg.e / s.d_head);
        for l in 0..s.layers {
            let steps = crate::scalar::round_half_even(cfg.r[l] / s.r_step) as usize;
            set_prefix(&mut bits, self.ratio_bits(l), steps);
            set_prefix(&mut bits, self.head_bits(l), cfg.h[l]);
            bits[self.mha_bit(l)] = cfg.mha[l];
            bits[self.mlp_bit(l)] = cfg.mlp[l];
        }
        Ok(bits)
    }

    /// Pack to bytes, LSB-first within each byte. Stable across runs; used
    /// as the canonical external form (hex) and as a map key.
    pub fn pack(bits: &[bool]) -> Vec<u8> {
        let mut out = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(&self, bytes: &[u8]) -> Result<Vec<bool>> {
        let n = self.len();
        if bytes.len() != n.div_ceil(8) {
            return Err(Error::Input(alloc::format!(
                "codec: {} packed bytes, expected {}",
                bytes.len(),
                n.div_ceil(8)
            )));
        }
        // Padding bits beyond the length must be zero.
        for i in n..bytes.len() * 8 {
            if bytes[i / 8] >> (i % 8) & 1 != 0 {
                return Err(Error::Input("codec: nonzero padding bit".into()));
            }
        }
        Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 != 0).collect())
    }

    /// Lowercase hex of the packed form.
    pub fn to_hex(bits: &[bool]) -> String {
        let mut s = String::new();
        for b in Self::pack(bits) {
            let hi = b >> 4;
            let lo = b & 0xf;
            for nib in [hi, lo] {
                s.push(char::from_digit(nib as u32, 16).unwrap());
            }
        }
        s
    }

    pub fn from_hex(&self, s: &str) -> Result<Vec<bool>> {
        let s = s.trim();
        if s.len() % 2 != 0 {
            return Err(Error::Input("codec: odd-length hex string".into()));
        }
        let mut bytes = Vec::with_capacity(s.len() / 2);
        let chars: Vec<char> = s.chars().collect();
        for pair in chars.chunks(2) {
            let hi = pair[0]
                .to_digit(16)
                .ok_or_else(|| Error::Input(alloc::format!("codec: bad hex digit {:?}", pair[0])))?;
            let lo = pair[1]
                .to_digit(16)
                .ok_or_else(|| Error::Input(alloc::format!("codec: bad hex digit {:?}", pair[1])))?;
            bytes.push((hi as u8) << 4 | lo as u8);
        }
        self.unpack(&bytes)
    }
}
