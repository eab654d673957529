//! Binary episode container.
//!
//! Layout, all integers little-endian:
//! `"TWLD"`, version `u16`, header `u32 x 7` (H, W, Z, C, T, L, agents),
//! labels `u8 x N*Z*H*W`, observations `u8 x N*Z*H*W`, actions `f32 x 2N`,
//! motion `f32 x 3N`, then the CRC32 of everything after the magic.

use std::fs;
use std::path::Path;

use super::{Episode, WorldError, NUM_CLASSES, UNKNOWN};

pub const EPISODE_MAGIC: [u8; 4] = *b"TWLD";
pub const EPISODE_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 7 * 4;

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ep.labels.len() * 2 + ep.steps() * 20 + 4);
    out.extend_from_slice(&EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    for d in [ep.height, ep.width, ep.z_slabs, ep.classes, ep.t_obs, ep.l_future, ep.n_agents] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&ep.labels);
    out.extend_from_slice(&ep.obs);
    for a in &ep.actions {
        a.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    for m in &ep.motion {
        m.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_episode(bytes: &[u8]) -> Result<Episode, WorldError> {
    if bytes.len() < 4 {
        return Err(WorldError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != EPISODE_MAGIC {
        return Err(WorldError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(WorldError::Truncated { expected: HEADER_LEN, found: bytes.len() });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EPISODE_VERSION {
        return Err(WorldError::Version { found: version, expected: EPISODE_VERSION });
    }
    let mut dims = [0usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    let [h, w, z, c, t, l, agents] = dims;
    let steps = t + l;
    let voxels = steps
        .checked_mul(z)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| WorldError::Corrupt("header dimensions overflow".into()))?;
    let expected = HEADER_LEN + 2 * voxels + steps * 20 + 4;
    if bytes.len() != expected {
        return Err(WorldError::Truncated { expected, found: bytes.len() });
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&body[4..]);
    if stored != computed {
        return Err(WorldError::Checksum { stored, computed });
    }
    if c != NUM_CLASSES {
        return Err(WorldError::Corrupt(format!("{c} classes")));
    }
    let mut at = HEADER_LEN;
    let labels = body[at..at + voxels].to_vec();
    at += voxels;
    let obs = body[at..at + voxels].to_vec();
    at += voxels;
    if labels.iter().any(|&v| v as usize >= c) {
        return Err(WorldError::Corrupt("label outside class range".into()));
    }
    if obs.iter().any(|&v| v as usize >= c && v != UNKNOWN) {
        return Err(WorldError::Corrupt("observation outside class range".into()));
    }
    let mut floats = body[at..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let actions = (0..steps).map(|_| [floats.next().unwrap(), floats.next().unwrap()]).collect();
    let motion = (0..steps)
        .map(|_| [floats.next().unwrap(), floats.next().unwrap(), floats.next().unwrap()])
        .collect();
    Ok(Episode {
        height: h,
        width: w,
        z_slabs: z,
        classes: c,
        t_obs: t,
        l_future: l,
        n_agents: agents,
        labels,
        obs,
        actions,
        motion,
    })
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<(), WorldError> {
    fs::write(path, encode_episode(ep))?;
    Ok(())
}

pub fn read_episode(path: &Path) -> Result<Episode, WorldError> {
    decode_episode(&fs::read(path)?)
}
