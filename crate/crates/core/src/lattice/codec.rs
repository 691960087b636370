use crate::error::{Error, Result};

use super::dither::DitherStream;
use super::truncated::{within_radius, TruncatedLattice};

/// A long vector cut into `L`-length blocks, zero-padded at the tail.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitVector {
    /// Row-major `M × L` block buffer.
    pub blocks: Vec<f64>,
    pub block_len: usize,
    pub padding: usize,
}

impl SplitVector {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len() / self.block_len
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i * self.block_len..(i + 1) * self.block_len]
    }

    /// Original length before padding.
    pub fn original_len(&self) -> usize {
        self.blocks.len() - self.padding
    }
}

pub fn split_vector(x: &[f64], block_len: usize) -> Result<SplitVector> {
    if x.is_empty() {
        return Err(Error::Usage("cannot split an empty vector".into()));
    }
    if block_len == 0 {
        return Err(Error::Usage("block length must be positive".into()));
    }
    let m = x.len().div_ceil(block_len);
    let padding = m * block_len - x.len();
    let mut blocks = Vec::with_capacity(m * block_len);
    blocks.extend_from_slice(x);
    blocks.resize(m * block_len, 0.0);
    Ok(SplitVector { blocks, block_len, padding })
}

/// Inverse of [`split_vector`]: concatenates and strips the padding.
pub fn recombine(blocks: &[f64], padding: usize) -> Vec<f64> {
    blocks[..blocks.len() - padding].to_vec()
}

/// Subtractive dithered quantizer over a truncated lattice with input scale ζ.
#[derive(Debug, Clone)]
pub struct SdqCodec {
    lattice: TruncatedLattice,
    zeta: f64,
    dither: DitherStream,
}

/// Client-side result of encoding a whole update vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedVector {
    pub indices: Vec<u32>,
    pub padding: usize,
    /// Local reconstruction, identical to what the decoder will produce.
    pub reconstruction: Vec<f64>,
    /// Blocks with `‖ζ·x + d‖ > γ`.
    pub overloaded: usize,
}

impl SdqCodec {
    pub fn new(lattice: TruncatedLattice, zeta: f64, dither: DitherStream) -> Result<Self> {
        if !zeta.is_finite() || zeta <= 0.0 {
            return Err(Error::Usage(format!("scale must be positive and finite, got {zeta}")));
        }
        if lattice.is_empty() {
            return Err(Error::Geometry("empty codebook".into()));
        }
        if dither.generator() != lattice.generator() {
            return Err(Error::Usage("dither stream and lattice use different generators".into()));
        }
        Ok(Self { lattice, zeta, dither })
    }

    pub fn lattice(&self) -> &TruncatedLattice {
        &self.lattice
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn dither(&self) -> &DitherStream {
        &self.dither
    }

    pub fn dither_mut(&mut self) -> &mut DitherStream {
        &mut self.dither
    }

    /// Codebook index of `Q(x + d)`; `x` must already be scaled by ζ.
    pub fn encode(&self, x: &[f64], d: &[f64]) -> Result<usize> {
        let dim = self.lattice.dim();
        if x.len() != dim || d.len() != dim {
            return Err(Error::Usage(format!(
                "block and dither must have length {dim}, got {} and {}",
                x.len(),
                d.len()
            )));
        }
        let shifted: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
        Ok(self.lattice.nearest_index(&shifted))
    }

    /// `(codebook[index] − d) / ζ`.
    pub fn decode(&self, index: usize, d: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.lattice.dim()];
        self.decode_into(index, d, &mut out)?;
        Ok(out)
    }

    pub fn decode_into(&self, index: usize, d: &[f64], out: &mut [f64]) -> Result<()> {
        if index >= self.lattice.len() {
            return Err(Error::Protocol(format!(
                "codeword index {index} out of range for a codebook of {}",
                self.lattice.len()
            )));
        }
        let p = self.lattice.point(index);
        for ((o, z), di) in out.iter_mut().zip(p).zip(d) {
            *o = (z - di) / self.zeta;
        }
        Ok(())
    }

    /// Scales, splits, dithers and encodes `h`, consuming one dither per block.
    pub fn encode_vector(&mut self, h: &[f64]) -> Result<EncodedVector> {
        let dim = self.lattice.dim();
        let split = split_vector(h, dim)?;
        let m = split.num_blocks();
        let mut indices = Vec::with_capacity(m);
        let mut recon = vec![0.0; m * dim];
        let mut d = vec![0.0; dim];
        let mut shifted = vec![0.0; dim];
        let mut overloaded = 0;
        for b in 0..m {
            self.dither.sample_into(&mut d);
            let x = split.block(b);
            for j in 0..dim {
                shifted[j] = self.zeta * x[j] + d[j];
            }
            if !within_radius(shifted.iter().map(|v| v * v).sum(), self.lattice.gamma()) {
                overloaded += 1;
            }
            let idx = self.lattice.nearest_index(&shifted);
            indices.push(idx as u32);
            self.decode_into(idx, &d, &mut recon[b * dim..(b + 1) * dim])?;
        }
        Ok(EncodedVector {
            indices,
            padding: split.padding,
            reconstruction: recombine(&recon, split.padding),
            overloaded,
        })
    }

    /// Server half: regenerates one dither per index from the stream.
    pub fn decode_vector(&mut self, indices: &[u32], padding: usize) -> Result<Vec<f64>> {
        let dim = self.lattice.dim();
        if padding >= dim.max(1) || (indices.is_empty() && padding > 0) {
            return Err(Error::Protocol(format!("invalid padding {padding} for block length {dim}")));
        }
        let mut out = vec![0.0; indices.len() * dim];
        let mut d = vec![0.0; dim];
        for (b, &idx) in indices.iter().enumerate() {
            self.dither.sample_into(&mut d);
            self.decode_into(idx as usize, &d, &mut out[b * dim..(b + 1) * dim])?;
        }
        Ok(recombine(&out, padding))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{shapes, GeneratorMatrix};
    use proptest::prelude::*;

    fn unit_codec(seed: u64) -> SdqCodec {
        let g = GeneratorMatrix::identity(2);
        let lat = TruncatedLattice::build(&g, 1.0).unwrap();
        SdqCodec::new(lat, 1.0, DitherStream::new(seed, g)).unwrap()
    }

    #[test]
    fn split_examples() {
        let s = split_vector(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!((s.num_blocks(), s.padding), (2, 0));
        let s = split_vector(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap();
        assert_eq!((s.num_blocks(), s.padding), (3, 1));
        assert_eq!(s.block(2), &[5.0, 0.0]);
        assert_eq!(recombine(&s.blocks, s.padding), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(split_vector(&[], 2).is_err());
    }

    proptest! {
        #[test]
        fn split_recombine_identity(x in prop::collection::vec(-1e3f64..1e3, 1..1000), l in 1usize..9) {
            let s = split_vector(&x, l).unwrap();
            prop_assert_eq!(s.num_blocks(), x.len().div_ceil(l));
            prop_assert_eq!(recombine(&s.blocks, s.padding), x);
        }
    }

    #[test]
    fn origin_roundtrip_with_zero_dither() {
        let c = unit_codec(0);
        let idx = c.encode(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(Some(idx), c.lattice().origin_index());
        assert_eq!(c.decode(idx, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn decode_rejects_bad_index_and_encode_bad_length() {
        let c = unit_codec(0);
        assert!(matches!(c.decode(99, &[0.0, 0.0]), Err(Error::Protocol(_))));
        assert!(matches!(c.encode(&[0.0], &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn error_lies_in_basic_cell_when_not_overloaded() {
        let g = shapes::hexagonal().scaled(0.25).unwrap();
        let lat = TruncatedLattice::build(&g, 1.0).unwrap();
        let mut stream = DitherStream::new(9, g.clone());
        let codec = SdqCodec::new(lat, 1.0, DitherStream::new(0, g.clone())).unwrap();
        let rho = g.covering_radius();
        let mut checked = 0;
        for k in 0..5000 {
            let t = k as f64 * 0.37;
            let x = [0.5 * t.cos(), 0.5 * (1.3 * t).sin()];
            let d = stream.sample();
            let idx = codec.encode(&x, &d).unwrap();
            let y = codec.decode(idx, &d).unwrap();
            let e: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let xd = [x[0] + d[0], x[1] + d[1]];
            // Away from the boundary the truncation cannot change the nearest point.
            if xd[0].hypot(xd[1]) <= 1.0 - rho {
                assert!(g.nearest_point(&e).iter().all(|&c| c == 0));
                assert!(e[0].hypot(e[1]) <= rho + 1e-12);
                checked += 1;
            }
        }
        assert!(checked > 2000, "{checked}");
    }

    #[test]
    fn vector_roundtrip_matches_server_decode() {
        let mut client = unit_codec(77);
        let mut server = unit_codec(77);
        let h: Vec<f64> = (0..11).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let enc = client.encode_vector(&h).unwrap();
        assert_eq!(enc.indices.len(), 6);
        assert_eq!(enc.padding, 1);
        let dec = server.decode_vector(&enc.indices, enc.padding).unwrap();
        assert_eq!(dec.len(), h.len());
        assert_eq!(
            dec.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            enc.reconstruction.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
