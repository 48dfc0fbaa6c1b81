//! CPU simulation of the inference path: quantile binary search, 4-bit INT4 / MX FP4 nibble
//! encoding, pair packing, and low-precision matmul with the `s_x * s_w` epilogue.
//!
//! Bit semantics follow the hardware formats exactly; timing is not modelled.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::InvCdfTable;
use crate::quantizers::{Bits, EmaState, Granularity, Method, QuantConfig, ScaleParam};
use crate::tensorio::{Tensor, TensorFile};

/// Storage format of 4-bit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// Two's complement signed integer, −8..7.
    Int4,
    /// MX FP4 (E2M1) element type, without the shared block exponent.
    MxFp4,
    /// Unsigned bin index `i = code + 2^(b−1) + z`.
    RawCodes,
}

const INT4_TABLE: [f32; 16] = [
    0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0,
];

const MXFP4_TABLE: [f32; 16] = [
    0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, // 0b0000..0b0111
    0.0, -0.5, -1.0, -1.5, -2.0, -3.0, -4.0, -6.0, // 0b1000..0b1111 (0b1000 is −0)
];

/// 16-entry value table of a hardware 4-bit type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NibbleCodec {
    pub encoding: Encoding,
    pub table: [f32; 16],
}

impl NibbleCodec {
    pub const INT4: NibbleCodec = NibbleCodec {
        encoding: Encoding::Int4,
        table: INT4_TABLE,
    };
    pub const MXFP4: NibbleCodec = NibbleCodec {
        encoding: Encoding::MxFp4,
        table: MXFP4_TABLE,
    };

    #[inline]
    pub fn decode(&self, nibble: u8) -> f32 {
        self.table[usize::from(nibble & 0x0F)]
    }

    /// Lowest pattern whose value equals `value`; zero therefore always maps to 0b0000.
    pub fn encode(&self, value: f64) -> Option<u8> {
        self.table
            .iter()
            .position(|&t| f64::from(t) == value)
            .map(|p| p as u8)
    }
}

impl Encoding {
    pub fn codec(self) -> Option<NibbleCodec> {
        match self {
            Encoding::Int4 => Some(NibbleCodec::INT4),
            Encoding::MxFp4 => Some(NibbleCodec::MXFP4),
            Encoding::RawCodes => None,
        }
    }

    /// Errors unless every code of the `(b, z)` code set has an exact pattern in this encoding.
    pub fn check_representable(self, bits: Bits, zero_point: f64) -> Result<()> {
        let Some(codec) = self.codec() else {
            return Ok(());
        };
        for code in bits.code_set(zero_point) {
            if codec.encode(code).is_none() {
                return Err(Error::Unrepresentable {
                    code: code as f32,
                    reason: format!(
                        "{self:?} cannot hold the {}-bit code set with zero point {zero_point}",
                        bits.get()
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Everything about a quantized tensor except its packed codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantHeader {
    pub shape: Vec<usize>,
    pub method: Method,
    pub encoding: Encoding,
    pub bits: Bits,
    pub zero_point: f64,
    pub granularity: Granularity,
    /// Per-group scale: γ for BBQ, the step `s` for LSQ, `α*σ` for QuEST, `σ` for codebooks.
    pub scales: Vec<f32>,
}

impl QuantHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.cols().max(1)
    }

    pub fn group_of_row(&self, row: usize) -> usize {
        match self.granularity {
            Granularity::PerChannel => row,
            Granularity::PerTensor => 0,
        }
    }

    /// Multiplier taking a code to its dequantized value, for linear-dequant methods.
    pub fn step_for_row(&self, row: usize) -> Result<f64> {
        let scale = f64::from(self.scales[self.group_of_row(row)]);
        match self.method {
            Method::Bbq | Method::BbqFast => Ok(scale / self.bits.half()),
            Method::Lsq => Ok(scale),
            Method::Quest | Method::Codebook => Err(Error::Unsupported(format!(
                "{:?} dequantization is not a per-row scaling",
                self.method
            ))),
        }
    }
}

/// 4-bit codes packed two per byte (element `2k` in the low nibble), plus their header.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    header: QuantHeader,
    packed: Vec<u8>,
}

impl QuantizedTensor {
    pub fn header(&self) -> &QuantHeader {
        &self.header
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn shape(&self) -> &[usize] {
        &self.header.shape
    }

    pub fn scales(&self) -> &[f32] {
        &self.header.scales
    }

    pub fn bits(&self) -> Bits {
        self.header.bits
    }

    pub fn encoding(&self) -> Encoding {
        self.header.encoding
    }

    pub fn numel(&self) -> usize {
        self.header.numel()
    }

    pub fn nibble(&self, index: usize) -> u8 {
        let byte = self.packed[index / 2];
        if index.is_multiple_of(2) {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    /// Writes the packed codes as a `BBQT` packed-nibble file and the header as `<path>.json`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        TensorFile::Packed {
            shape: self.header.shape.clone(),
            bytes: self.packed.clone(),
        }
        .write(path)?;
        let meta = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.header)?;
        std::fs::write(&meta, json).map_err(|e| Error::io(meta, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let TensorFile::Packed { shape, bytes } = TensorFile::read(path)? else {
            return Err(Error::InvalidArgument(format!(
                "{} is not a packed-nibble tensor file",
                path.display()
            )));
        };
        let meta = sidecar_path(path);
        let text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let header: QuantHeader = serde_json::from_str(&text)?;
        if header.shape != shape {
            return Err(Error::Shape(format!(
                "sidecar shape {:?} disagrees with file shape {shape:?}",
                header.shape
            )));
        }
        let qt = Self {
            header,
            packed: bytes,
        };
        // Re-validate every nibble against the header.
        encode_codes(&decode_codes(&qt), qt.header.clone())?;
        Ok(qt)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn code_to_nibble(code: f64, header: &QuantHeader) -> Result<u8> {
    let bits = header.bits;
    let unrepresentable = |reason: &str| Error::Unrepresentable {
        code: code as f32,
        reason: reason.to_string(),
    };
    let bin = code + bits.half() + header.zero_point;
    if bin.fract() != 0.0 || bin < 0.0 || bin >= bits.levels() as f64 {
        return Err(unrepresentable(&format!(
            "outside the {}-bit code set with zero point {}",
            bits.get(),
            header.zero_point
        )));
    }
    match header.encoding.codec() {
        None => Ok(bin as u8),
        Some(codec) => codec
            .encode(code)
            .ok_or_else(|| unrepresentable(&format!("no {:?} pattern", header.encoding))),
    }
}

/// Maps each code to its 4-bit pattern and packs pairs into bytes.
pub fn encode_codes(codes: &[f64], header: QuantHeader) -> Result<QuantizedTensor> {
    if header.shape.is_empty() || header.numel() != codes.len() {
        return Err(Error::Shape(format!(
            "{} codes for shape {:?}",
            codes.len(),
            header.shape
        )));
    }
    let groups = header.granularity.num_groups(header.rows());
    if header.scales.len() != groups {
        return Err(Error::Shape(format!(
            "{:?} granularity over {} rows needs {groups} scales, got {}",
            header.granularity,
            header.rows(),
            header.scales.len()
        )));
    }
    header
        .encoding
        .check_representable(header.bits, header.zero_point)?;
    let mut packed = vec![0u8; codes.len().div_ceil(2)];
    for (i, &code) in codes.iter().enumerate() {
        let nibble = code_to_nibble(code, &header)?;
        packed[i / 2] |= nibble << (4 * (i % 2));
    }
    Ok(QuantizedTensor { header, packed })
}

/// Numeric code values of every element.
pub fn decode_codes(qt: &QuantizedTensor) -> Vec<f64> {
    let h = &qt.header;
    let offset = h.bits.half() + h.zero_point;
    (0..qt.numel())
        .map(|i| {
            let n = qt.nibble(i);
            match h.encoding.codec() {
                Some(codec) => f64::from(codec.decode(n)),
                None => f64::from(n) - offset,
            }
        })
        .collect()
}

/// Bin indices by binary search over the quantile boundaries.
pub fn binsearch_bins(v: &[f64], table: &InvCdfTable) -> Vec<u8> {
    v.iter().map(|&x| table.search(x) as u8).collect()
}

/// Codes `i − 2^(b−1) − z` with `i` found by `b` comparisons against the boundary table.
pub fn binsearch_quantize(v: &Tensor, table: &InvCdfTable, zero_point: f64) -> Vec<f64> {
    let offset = (1u32 << (table.bits() - 1)) as f64 + zero_point;
    v.data()
        .iter()
        .map(|&x| table.search(f64::from(x)) as f64 - offset)
        .collect()
}

/// Inference kernel: blocked Hadamard, multiply by `E[1/σ]`, binary search, encode.
pub fn quantize_kernel_sim(
    x: &Tensor,
    table: &InvCdfTable,
    ema: &EmaState,
    cfg: &QuantConfig,
    scale: &ScaleParam,
) -> Result<QuantizedTensor> {
    cfg.validate()?;
    cfg.plan.check_cols(x.cols())?;
    if table.bits() != cfg.bits.get() {
        return Err(Error::InvalidArgument(format!(
            "table built for {} bits, config has {}",
            table.bits(),
            cfg.bits.get()
        )));
    }
    if !ema.initialized {
        return Err(Error::Uninitialized("EMA of 1/sigma has not been seeded".into()));
    }
    let mut v = x.to_f64();
    cfg.plan.apply_in_place(&mut v);
    let offset = cfg.bits.half() + cfg.zero_point;
    let codes: Vec<f64> = v
        .iter()
        .map(|&h| table.search(h * ema.e_inv_sigma) as f64 - offset)
        .collect();
    encode_codes(
        &codes,
        QuantHeader {
            shape: x.shape().to_vec(),
            method: Method::BbqFast,
            encoding: cfg.encoding,
            bits: cfg.bits,
            zero_point: cfg.zero_point,
            granularity: cfg.granularity,
            scales: scale.gamma.iter().map(|&g| g as f32).collect(),
        },
    )
}

fn as_matrix(h: &QuantHeader, name: &str) -> Result<(usize, usize)> {
    if h.shape.len() != 2 {
        return Err(Error::Shape(format!(
            "{name} must be 2-D, got shape {:?}",
            h.shape
        )));
    }
    Ok((h.shape[0], h.shape[1]))
}

/// `a · wᵀ` for activations `a` of shape `[M, K]` and weights `w` of shape `[N, K]`
/// (one row per output channel).
///
/// INT4 operands are accumulated exactly in `i32`; MX FP4 operands in `f32`. Each output
/// is then scaled by `s_x(m) · s_w(n)` in `f64` and rounded once to `f32`.
pub fn lowprec_matmul(a: &QuantizedTensor, w: &QuantizedTensor) -> Result<Tensor> {
    let (m, k) = as_matrix(&a.header, "activation")?;
    let (n, kw) = as_matrix(&w.header, "weight")?;
    if k != kw {
        return Err(Error::Shape(format!(
            "inner dimensions differ: activation K={k}, weight K={kw}"
        )));
    }
    if a.encoding() != w.encoding() {
        return Err(Error::InvalidArgument(format!(
            "encoding mismatch: {:?} x {:?}",
            a.encoding(),
            w.encoding()
        )));
    }
    let sa: Vec<f64> = (0..m).map(|r| a.header.step_for_row(r)).collect::<Result<_>>()?;
    let sw: Vec<f64> = (0..n).map(|r| w.header.step_for_row(r)).collect::<Result<_>>()?;
    let mut out = vec![0f32; m * n];
    match a.encoding() {
        Encoding::Int4 => {
            let qa: Vec<i32> = (0..a.numel()).map(|i| INT4_TABLE[a.nibble(i) as usize] as i32).collect();
            let qw: Vec<i32> = (0..w.numel()).map(|i| INT4_TABLE[w.nibble(i) as usize] as i32).collect();
            for i in 0..m {
                let row = &qa[i * k..(i + 1) * k];
                for j in 0..n {
                    let col = &qw[j * k..(j + 1) * k];
                    let acc: i32 = row.iter().zip(col).map(|(x, y)| x * y).sum();
                    out[i * n + j] = (f64::from(acc) * sa[i] * sw[j]) as f32;
                }
            }
        }
        Encoding::MxFp4 => {
            let qa: Vec<f32> = (0..a.numel()).map(|i| MXFP4_TABLE[a.nibble(i) as usize]).collect();
            let qw: Vec<f32> = (0..w.numel()).map(|i| MXFP4_TABLE[w.nibble(i) as usize]).collect();
            for i in 0..m {
                let row = &qa[i * k..(i + 1) * k];
                for j in 0..n {
                    let col = &qw[j * k..(j + 1) * k];
                    let acc: f32 = row.iter().zip(col).fold(0.0, |s, (x, y)| s + x * y);
                    out[i * n + j] = (f64::from(acc) * sa[i] * sw[j]) as f32;
                }
            }
        }
        Encoding::RawCodes => {
            return Err(Error::Unsupported(
                "raw bin indices have no low-precision arithmetic; encode as INT4 or MX FP4".into(),
            ))
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Operation counts for one quantized linear layer (`[M, K] x [N, K]ᵀ`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    /// 4-bit multiply-accumulates.
    pub lowprec_macs: u64,
    /// Multiply-accumulates of the Hadamard transform, as a dense `H x H` product per block.
    pub hadamard_macs: u64,
    /// Boundary comparisons of the binary search.
    pub comparisons: u64,
    /// Full-precision multiplies of the `s_x s_w` epilogue.
    pub epilogue_mults: u64,
    /// Multiply-accumulates the same layer costs in full precision.
    pub dense_macs: u64,
}

pub fn op_counts(m: usize, k: usize, n: usize, block: usize, bits: Bits) -> OpCounts {
    let (m, k, n, h) = (m as u64, k as u64, n as u64, block as u64);
    OpCounts {
        lowprec_macs: m * k * n,
        hadamard_macs: m * k * h,
        comparisons: m * k * u64::from(bits.get()),
        epilogue_mults: 2 * m * n,
        dense_macs: m * k * n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::build_inv_cdf_table;

    fn header(shape: Vec<usize>, bits: u32, encoding: Encoding) -> QuantHeader {
        let bits = Bits::new(bits).unwrap();
        QuantHeader {
            shape,
            method: Method::Bbq,
            encoding,
            bits,
            zero_point: bits.bbq_zero_point(),
            granularity: Granularity::PerTensor,
            scales: vec![1.0],
        }
    }

    #[test]
    fn table5_patterns() {
        assert_eq!(NibbleCodec::INT4.encode(3.0), Some(0b0011));
        assert_eq!(NibbleCodec::MXFP4.encode(3.0), Some(0b0101));
        assert_eq!(NibbleCodec::MXFP4.encode(-1.5), Some(0b1011));
        assert_eq!(NibbleCodec::MXFP4.encode(0.0), Some(0b0000));
        assert_eq!(NibbleCodec::MXFP4.decode(0b1000), 0.0);
        assert_eq!(NibbleCodec::INT4.decode(0b1000), -8.0);
        assert_eq!(NibbleCodec::MXFP4.encode(5.0), None);
    }

    #[test]
    fn table2_ticks() {
        let ok = |b: u32, e: Encoding| {
            let bits = Bits::new(b).unwrap();
            e.check_representable(bits, bits.bbq_zero_point()).is_ok()
        };
        assert!(ok(4, Encoding::Int4) && !ok(4, Encoding::MxFp4));
        assert!(ok(3, Encoding::Int4) && ok(3, Encoding::MxFp4));
        assert!(!ok(2, Encoding::Int4) && ok(2, Encoding::MxFp4));
        assert!(!ok(1, Encoding::Int4) && ok(1, Encoding::MxFp4));
    }

    #[test]
    fn packing_order_is_low_nibble_first() {
        let qt = encode_codes(&[1.0, 2.0, 3.0], header(vec![3], 3, Encoding::Int4)).unwrap();
        assert_eq!(qt.packed(), &[0x21, 0x03]);
        assert_eq!(decode_codes(&qt), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn raw_codes_store_bin_index() {
        let qt = encode_codes(&[-1.5, 1.5], header(vec![2], 2, Encoding::RawCodes)).unwrap();
        assert_eq!(qt.packed(), &[0x30]);
        assert_eq!(decode_codes(&qt), vec![-1.5, 1.5]);
    }

    #[test]
    fn rejects_codes_outside_code_set() {
        assert!(encode_codes(&[4.0], header(vec![1], 3, Encoding::Int4)).is_err());
        assert!(encode_codes(&[0.0], header(vec![1], 2, Encoding::MxFp4)).is_err());
        assert!(encode_codes(&[0.0], header(vec![1], 4, Encoding::MxFp4)).is_err());
    }

    #[test]
    fn alg1_probe_values() {
        let t = build_inv_cdf_table(3).unwrap();
        let v = Tensor::new(vec![5], vec![0.7, 0.4, -0.4, -2.0, -5.0]).unwrap();
        assert_eq!(binsearch_quantize(&v, &t, 0.0), vec![2.0, 1.0, -2.0, -4.0, -4.0]);
    }

    #[test]
    fn tiny_matmul() {
        let a = encode_codes(&[3.0], header(vec![1, 1], 3, Encoding::Int4)).unwrap();
        let w = encode_codes(&[-2.0], header(vec![1, 1], 3, Encoding::Int4)).unwrap();
        assert_eq!(lowprec_matmul(&a, &w).unwrap().data(), &[-0.375]);
        let a = encode_codes(&[3.0], header(vec![1, 1], 3, Encoding::MxFp4)).unwrap();
        let w = encode_codes(&[-2.0], header(vec![1, 1], 3, Encoding::MxFp4)).unwrap();
        assert_eq!(lowprec_matmul(&a, &w).unwrap().data(), &[-0.375]);
    }

    #[test]
    fn matmul_errors() {
        let a = encode_codes(&[0.0; 4], header(vec![2, 2], 3, Encoding::Int4)).unwrap();
        let w = encode_codes(&[0.0; 3], header(vec![1, 3], 3, Encoding::Int4)).unwrap();
        assert!(matches!(lowprec_matmul(&a, &w), Err(Error::Shape(_))));
        let w = encode_codes(&[0.0; 2], header(vec![1, 2], 3, Encoding::MxFp4)).unwrap();
        assert!(lowprec_matmul(&a, &w).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.bbqt");
        let qt = encode_codes(&[-4.0, 3.0, 0.0], header(vec![1, 3], 3, Encoding::MxFp4)).unwrap();
        qt.write(&p).unwrap();
        assert_eq!(QuantizedTensor::read(&p).unwrap(), qt);
    }
}
