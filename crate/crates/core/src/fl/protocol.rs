use crate::error::{Error, Result};
use crate::lattice::{DitherStream, GeneratorMatrix, SdqCodec, TruncatedLattice};
use crate::rng::mix;

/// Bits one client sends per round with a lattice quantizer:
/// `⌈m·R⌉ + 64·L²`, plus 64 for ζ when `include_zeta`.
pub fn bits_accounting(m: usize, rate: f64, dim: usize, include_zeta: bool) -> u64 {
    let payload = (m as f64 * rate).ceil() as u64;
    payload + 64 * (dim * dim) as u64 + if include_zeta { 64 } else { 0 }
}

/// Bits for an unquantized update of `m` doubles.
pub fn raw_bits(m: usize) -> u64 {
    64 * m as u64
}

/// Seed of the dither stream client `u` uses in round `t`.
pub fn round_dither_seed(xi: u64, t: u64) -> u64 {
    mix(xi, t)
}

#[derive(Debug, Clone, PartialEq)]
pub enum PayloadBody {
    Raw(Vec<f64>),
    Lattice { gen: GeneratorMatrix, zeta: f64, padding: usize, indices: Vec<u32> },
}

/// What a client uploads in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub client: u32,
    pub round: u64,
    pub body: PayloadBody,
}

const TAG_RAW: u8 = 0;
const TAG_LATTICE: u8 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Protocol(format!("payload truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Payload {
    /// Little-endian wire form. Header: `u32` client, `u64` round, `u8` tag.
    /// Raw body: `u32` m, `f64 × m`. Lattice body: generator (`u32` L +
    /// `f64 × L²`), `f64` ζ, `u32` padding, `u32` count, `u32 × count`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.client.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        match &self.body {
            PayloadBody::Raw(h) => {
                out.push(TAG_RAW);
                out.extend_from_slice(&(h.len() as u32).to_le_bytes());
                for v in h {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            PayloadBody::Lattice { gen, zeta, padding, indices } => {
                out.push(TAG_LATTICE);
                gen.write_bytes(&mut out);
                out.extend_from_slice(&zeta.to_le_bytes());
                out.extend_from_slice(&(*padding as u32).to_le_bytes());
                out.extend_from_slice(&(indices.len() as u32).to_le_bytes());
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let client = r.u32()?;
        let round = r.u64()?;
        let body = match r.take(1)?[0] {
            TAG_RAW => {
                let m = r.u32()? as usize;
                let h = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                PayloadBody::Raw(h)
            }
            TAG_LATTICE => {
                let (gen, used) = GeneratorMatrix::from_bytes(&bytes[r.at..])?;
                r.at += used;
                let zeta = r.f64()?;
                if !zeta.is_finite() || zeta <= 0.0 {
                    return Err(Error::Protocol(format!("invalid scale {zeta}")));
                }
                let padding = r.u32()? as usize;
                let count = r.u32()? as usize;
                let indices = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                PayloadBody::Lattice { gen, zeta, padding, indices }
            }
            tag => return Err(Error::Protocol(format!("unknown payload tag {tag}"))),
        };
        if r.at != bytes.len() {
            return Err(Error::Protocol(format!("{} trailing bytes after payload", bytes.len() - r.at)));
        }
        Ok(Payload { client, round, body })
    }

    /// Decoded update length.
    pub fn update_len(&self) -> usize {
        match &self.body {
            PayloadBody::Raw(h) => h.len(),
            PayloadBody::Lattice { gen, padding, indices, .. } => indices.len() * gen.dim() - padding,
        }
    }
}

/// Client-side encoding of update `h` with the round's dither stream.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub payload: Payload,
    pub reconstruction: Vec<f64>,
    pub overloaded: usize,
    pub blocks: usize,
}

pub fn encode_update(
    client: u32,
    round: u64,
    xi: u64,
    h: &[f64],
    lattice: &TruncatedLattice,
    zeta: f64,
) -> Result<Encoded> {
    let gen = lattice.generator().clone();
    let stream = DitherStream::new(round_dither_seed(xi, round), gen.clone());
    let mut codec = SdqCodec::new(lattice.clone(), zeta, stream)?;
    let enc = codec.encode_vector(h)?;
    let blocks = enc.indices.len();
    Ok(Encoded {
        payload: Payload {
            client,
            round,
            body: PayloadBody::Lattice { gen, zeta, padding: enc.padding, indices: enc.indices },
        },
        reconstruction: enc.reconstruction,
        overloaded: enc.overloaded,
        blocks,
    })
}

/// Server-side reconstruction: rebuilds the codebook from the transmitted
/// generator and regenerates the dithers from `xi` and the round index.
pub fn decode_payload(payload: &Payload, xi: u64, gamma: f64) -> Result<Vec<f64>> {
    match &payload.body {
        PayloadBody::Raw(h) => Ok(h.clone()),
        PayloadBody::Lattice { gen, zeta, padding, indices } => {
            let lattice = TruncatedLattice::build(gen, gamma)?;
            let stream = DitherStream::new(round_dither_seed(xi, payload.round), gen.clone());
            SdqCodec::new(lattice, *zeta, stream)?.decode_vector(indices, *padding)
        }
    }
}

/// Federated averaging of decoded payloads: `w += (1/U)·Σ_u ĥ_u` with the
/// sum taken in ascending client order. Every client `0..U` must be present
/// exactly once.
pub fn server_round(payloads: &[Payload], w: &mut [f64], seeds: &[u64], round: u64, gamma: f64) -> Result<Vec<Vec<f64>>> {
    let users = seeds.len();
    let mut slots: Vec<Option<&Payload>> = vec![None; users];
    for p in payloads {
        let u = p.client as usize;
        if u >= users {
            return Err(Error::Protocol(format!("payload from unknown client {u}")));
        }
        if p.round != round {
            return Err(Error::Protocol(format!("client {u} sent round {} during round {round}", p.round)));
        }
        if slots[u].replace(p).is_some() {
            return Err(Error::Protocol(format!("duplicate payload from client {u}")));
        }
    }
    let mut decoded = Vec::with_capacity(users);
    for (u, slot) in slots.iter().enumerate() {
        let p = slot.ok_or_else(|| Error::Protocol(format!("missing payload from client {u} in round {round}")))?;
        let h = decode_payload(p, seeds[u], gamma)?;
        if h.len() != w.len() {
            return Err(Error::Protocol(format!("client {u} sent {} values for a model of {}", h.len(), w.len())));
        }
        decoded.push(h);
    }
    let mut acc = vec![0.0; w.len()];
    for h in &decoded {
        for (a, v) in acc.iter_mut().zip(h) {
            *a += v;
        }
    }
    let inv = users as f64;
    for (wi, a) in w.iter_mut().zip(&acc) {
        *wi += a / inv;
    }
    Ok(decoded)
}
