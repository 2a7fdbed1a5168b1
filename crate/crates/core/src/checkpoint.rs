//! Versioned checkpoint container: a line-oriented text header followed by the
//! raw little-endian `f64` payload of each named block.
//!
//! ```text
//! REFTRACK-CKPT 1
//! fingerprint <hex>
//! kind <reference|robust>
//! iteration <n>
//! rng <seed-hex> <stream> <word-pos>
//! meta <key> <value>
//! block <name> <d0xd1x..> <checksum>
//! end
//! <payload>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::dynamics::{DynModel, SigmaStats};
use crate::env::OBS_DIM;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp};
use crate::pipeline::{Reference, Variant, Wiring};
use crate::policy::{Actor, Critic};
use crate::rng::RngSnapshot;

pub const MAGIC: &str = "REFTRACK-CKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub fingerprint: String,
    pub kind: String,
    pub iteration: u64,
    pub rng: Option<RngSnapshot>,
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<Block>,
}

fn corrupt(block: &str, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        block: block.to_string(),
        reason: reason.into(),
    }
}

fn checksum(data: &[u8]) -> String {
    hex::encode(&Sha256::digest(data)[..8])
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(|c| c.is_whitespace())
}

impl Checkpoint {
    pub fn new(fingerprint: &str, kind: &str) -> Self {
        Self {
            version: VERSION,
            fingerprint: fingerprint.to_string(),
            kind: kind.to_string(),
            iteration: 0,
            rng: None,
            meta: BTreeMap::new(),
            blocks: Vec::new(),
        }
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| corrupt(name, "block missing"))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| corrupt(key, "meta entry missing"))
    }

    fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| corrupt(key, "unparsable meta value"))
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(Block {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !valid_token(&self.fingerprint) || !valid_token(&self.kind) {
            return Err(Error::InvalidArgument(
                "fingerprint and kind must be non-empty tokens".into(),
            ));
        }
        let mut head = format!(
            "{MAGIC} {}\nfingerprint {}\nkind {}\niteration {}\n",
            self.version, self.fingerprint, self.kind, self.iteration
        );
        if let Some(r) = &self.rng {
            head += &format!("rng {} {} {}\n", hex::encode(r.seed), r.stream, r.word_pos);
        }
        for (k, v) in &self.meta {
            if !valid_token(k) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("bad meta entry `{k}`")));
            }
            head += &format!("meta {k} {v}\n");
        }
        let mut payload = Vec::new();
        for b in &self.blocks {
            if !valid_token(&b.name) {
                return Err(Error::InvalidArgument(format!("bad block name `{}`", b.name)));
            }
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(Error::InvalidArgument(format!("block `{}` shape/data mismatch", b.name)));
            }
            let start = payload.len();
            for v in &b.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let dims: Vec<String> = b.shape.iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            head += &format!("block {} {} {}\n", b.name, dims, checksum(&payload[start..]));
        }
        head += "end\n";
        let mut out = head.into_bytes();
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_header_end(bytes).ok_or_else(|| corrupt("header", "no `end` line"))?;
        let head = std::str::from_utf8(&bytes[..end]).map_err(|_| corrupt("header", "not UTF-8"))?;
        let mut lines = head.lines();
        let first = lines.next().ok_or_else(|| corrupt("header", "empty"))?;
        let version = match first.split_once(' ') {
            Some((MAGIC, v)) => v.parse::<u32>().map_err(|_| corrupt("header", "bad version"))?,
            _ => return Err(corrupt("header", "bad magic")),
        };
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                supported: VERSION,
            });
        }
        let mut ck = Checkpoint::new("-", "-");
        ck.version = version;
        let mut specs: Vec<(String, Vec<usize>, String)> = Vec::new();
        for line in lines {
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match key {
                "fingerprint" => ck.fingerprint = rest.to_string(),
                "kind" => ck.kind = rest.to_string(),
                "iteration" => {
                    ck.iteration = rest.parse().map_err(|_| corrupt("header", "bad iteration"))?
                }
                "rng" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let bad = || corrupt("rng", "malformed rng line");
                    if f.len() != 3 {
                        return Err(bad());
                    }
                    let seed: [u8; 32] = hex::decode(f[0])
                        .map_err(|_| bad())?
                        .try_into()
                        .map_err(|_| bad())?;
                    ck.rng = Some(RngSnapshot {
                        seed,
                        stream: f[1].parse().map_err(|_| bad())?,
                        word_pos: f[2].parse().map_err(|_| bad())?,
                    });
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.insert(k.to_string(), v.to_string());
                }
                "block" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(corrupt(f.first().copied().unwrap_or("?"), "malformed block line"));
                    }
                    let shape = if f[1] == "scalar" {
                        Vec::new()
                    } else {
                        f[1].split('x')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|_| corrupt(f[0], "bad shape"))?
                    };
                    specs.push((f[0].to_string(), shape, f[2].to_string()));
                }
                _ => return Err(corrupt("header", format!("unknown line `{line}`"))),
            }
        }
        let mut pos = end + "end\n".len();
        for (name, shape, sum) in specs {
            let n: usize = shape.iter().product();
            let len = n * 8;
            if bytes.len() < pos + len {
                return Err(corrupt(
                    &name,
                    format!("truncated: need {len} bytes, {} left", bytes.len().saturating_sub(pos)),
                ));
            }
            let raw = &bytes[pos..pos + len];
            if checksum(raw) != sum {
                return Err(corrupt(&name, "checksum mismatch"));
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            ck.blocks.push(Block { name, shape, data });
            pos += len;
        }
        if pos != bytes.len() {
            return Err(corrupt("trailer", format!("{} unexpected bytes", bytes.len() - pos)));
        }
        Ok(ck)
    }
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let pat = b"\nend\n";
    bytes.windows(pat.len()).position(|w| w == pat).map(|p| p + 1)
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    std::fs::write(path, c.to_bytes()?)?;
    Ok(())
}

/// Reads a checkpoint and, when `active` is given, refuses a fingerprint
/// mismatch unless `force` is set.
pub fn load_checkpoint(path: &Path, active: Option<&str>, force: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let ck = Checkpoint::from_bytes(&bytes)?;
    if let Some(a) = active {
        if ck.fingerprint != a && !force {
            return Err(Error::FingerprintMismatch {
                checkpoint: ck.fingerprint.clone(),
                active: a.to_string(),
            });
        }
    }
    Ok(ck)
}

pub fn put_mlp(ck: &mut Checkpoint, prefix: &str, m: &Mlp) {
    ck.set_meta(&format!("{prefix}.layers"), m.layers().len());
    for (l, shape) in m.layers().iter().enumerate() {
        ck.set_meta(&format!("{prefix}.{l}.act"), shape.activation.tag());
        let w = m.weight(l);
        ck.put(
            &format!("{prefix}.{l}.w"),
            &[shape.out_dim, shape.in_dim],
            &w.iter().copied().collect::<Vec<_>>(),
        );
        ck.put(&format!("{prefix}.{l}.b"), &[shape.out_dim], &m.bias(l).to_vec());
    }
}

pub fn get_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let n: usize = ck.meta_parse(&format!("{prefix}.layers"))?;
    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let act_key = format!("{prefix}.{l}.act");
        let act = Activation::from_tag(ck.meta(&act_key)?)
            .ok_or_else(|| corrupt(&act_key, "unknown activation"))?;
        let wn = format!("{prefix}.{l}.w");
        let w = ck.block(&wn)?;
        if w.shape.len() != 2 {
            return Err(corrupt(&wn, "weight must be 2-D"));
        }
        let w = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
            .map_err(|e| corrupt(&wn, e.to_string()))?;
        let b = ck.block(&format!("{prefix}.{l}.b"))?.data.clone();
        layers.push((w, b, act));
    }
    Mlp::from_layers(layers).map_err(|e| corrupt(prefix, e.to_string()))
}

pub fn put_actor(ck: &mut Checkpoint, prefix: &str, a: &Actor) {
    put_mlp(ck, &format!("{prefix}.encoder"), &a.encoder);
    put_mlp(ck, &format!("{prefix}.head"), &a.head);
    ck.put(&format!("{prefix}.log_std"), &[a.log_std.len()], &a.log_std);
    ck.set_meta(&format!("{prefix}.frames"), a.frames);
    ck.set_meta(&format!("{prefix}.has_refs"), a.has_refs);
}

pub fn get_actor(ck: &Checkpoint, prefix: &str) -> Result<Actor> {
    Ok(Actor {
        encoder: get_mlp(ck, &format!("{prefix}.encoder"))?,
        head: get_mlp(ck, &format!("{prefix}.head"))?,
        log_std: ck.block(&format!("{prefix}.log_std"))?.data.clone(),
        frames: ck.meta_parse(&format!("{prefix}.frames"))?,
        has_refs: ck.meta_parse(&format!("{prefix}.has_refs"))?,
    })
}

pub fn put_critic(ck: &mut Checkpoint, prefix: &str, c: &Critic) {
    put_mlp(ck, prefix, &c.net);
    ck.set_meta(&format!("{prefix}.frames"), c.frames);
}

pub fn get_critic(ck: &Checkpoint, prefix: &str) -> Result<Critic> {
    Ok(Critic {
        net: get_mlp(ck, prefix)?,
        frames: ck.meta_parse(&format!("{prefix}.frames"))?,
    })
}

pub fn put_model(ck: &mut Checkpoint, prefix: &str, m: &DynModel) {
    put_mlp(ck, &format!("{prefix}.trunk"), &m.trunk);
    put_mlp(ck, &format!("{prefix}.mu"), &m.mu_head);
    put_mlp(ck, &format!("{prefix}.sigma"), &m.sigma_head);
    ck.put(&format!("{prefix}.sigma_floor"), &[], &[m.sigma_floor]);
    ck.set_meta(&format!("{prefix}.persistence_skip"), m.persistence_skip);
}

pub fn get_model(ck: &Checkpoint, prefix: &str) -> Result<DynModel> {
    Ok(DynModel {
        trunk: get_mlp(ck, &format!("{prefix}.trunk"))?,
        mu_head: get_mlp(ck, &format!("{prefix}.mu"))?,
        sigma_head: get_mlp(ck, &format!("{prefix}.sigma"))?,
        sigma_floor: ck.block(&format!("{prefix}.sigma_floor"))?.data[0],
        persistence_skip: ck.meta_parse(&format!("{prefix}.persistence_skip"))?,
    })
}

pub fn put_stats(ck: &mut Checkpoint, s: &SigmaStats) {
    ck.put("sigma.min", &[OBS_DIM], &s.min);
    ck.put("sigma.max", &[OBS_DIM], &s.max);
    ck.set_meta("sigma.count", s.count);
}

pub fn get_stats(ck: &Checkpoint) -> Result<SigmaStats> {
    let arr = |name: &str| -> Result<[f64; OBS_DIM]> {
        ck.block(name)?
            .data
            .as_slice()
            .try_into()
            .map_err(|_| corrupt(name, "expected 9 values"))
    };
    Ok(SigmaStats {
        min: arr("sigma.min")?,
        max: arr("sigma.max")?,
        count: ck.meta_parse("sigma.count")?,
    })
}

pub fn put_reference(ck: &mut Checkpoint, r: &Reference) {
    put_actor(ck, "ideal", &r.ideal);
    put_model(ck, "model", &r.model);
    put_stats(ck, &r.stats);
}

pub fn get_reference(ck: &Checkpoint) -> Result<Reference> {
    Ok(Reference {
        ideal: get_actor(ck, "ideal")?,
        model: get_model(ck, "model")?,
        stats: get_stats(ck)?,
    })
}

pub fn has_reference(ck: &Checkpoint) -> bool {
    ck.meta.contains_key("ideal.frames")
}

/// Robust policy with its wiring; the reference is embedded so the checkpoint
/// evaluates on its own.
pub fn robust_checkpoint(fingerprint: &str, actor: &Actor, critic: &Critic, wiring: &Wiring) -> Checkpoint {
    let mut ck = Checkpoint::new(fingerprint, "robust");
    ck.set_meta("variant", wiring.variant.tag);
    put_actor(&mut ck, "actor", actor);
    put_critic(&mut ck, "critic", critic);
    if let Some(r) = &wiring.reference {
        put_reference(&mut ck, r);
    }
    ck
}

/// Policy and wiring from a robust checkpoint, or the plain ideal policy from a
/// reference checkpoint.
pub fn policy_from_checkpoint(ck: &Checkpoint) -> Result<(Actor, Wiring)> {
    match ck.kind.as_str() {
        "robust" => {
            let variant = Variant::from_tag(ck.meta("variant")?)?;
            let reference = if has_reference(ck) {
                Some(get_reference(ck)?)
            } else {
                None
            };
            Ok((get_actor(ck, "actor")?, Wiring::new(variant, reference)?))
        }
        "reference" => Ok((get_actor(ck, "ideal")?, Wiring::plain())),
        other => Err(corrupt("kind", format!("unknown checkpoint kind `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynModelConfig;
    use crate::policy::NetworkConfig;
    use crate::rng::stream_rng;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("abc123", "robust");
        ck.iteration = 42;
        ck.rng = Some(RngSnapshot::capture(&stream_rng(5, 2)));
        ck.set_meta("variant", 'F');
        ck.put("a", &[2, 3], &[1.0, -2.0, 3.5, f64::MIN_POSITIVE, -0.0, 1e300]);
        ck.put("b", &[], &[0.25]);
        ck
    }

    #[test]
    fn roundtrip_is_exact() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.blocks[0].data[4].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn truncation_names_block() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint { ref block, .. } if block == "b"), "{err}");
    }

    #[test]
    fn bit_flip_names_block() {
        let mut bytes = sample().to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint { ref block, .. } if block == "a"), "{err}");
    }

    #[test]
    fn header_damage_is_reported() {
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage"),
            Err(Error::CorruptCheckpoint { .. })
        ));
        let bytes = sample().to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes).replace("REFTRACK-CKPT 1", "REFTRACK-CKPT 9");
        assert!(matches!(
            Checkpoint::from_bytes(text.as_bytes()),
            Err(Error::CheckpointVersion { found: 9, supported: 1 }) | Err(Error::CorruptCheckpoint { .. })
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut ck = sample();
        ck.version = 2;
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, supported: 1 })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CorruptCheckpoint { ref block, .. }) if block == "trailer"
        ));
    }

    #[test]
    fn fingerprint_refusal_and_force() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        save_checkpoint(&p, &sample()).unwrap();
        assert!(load_checkpoint(&p, Some("abc123"), false).is_ok());
        let err = load_checkpoint(&p, Some("zzz"), false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("abc123") && msg.contains("zzz"));
        assert!(load_checkpoint(&p, Some("zzz"), true).is_ok());
    }

    #[test]
    fn networks_roundtrip() {
        let mut rng = stream_rng(3, 0);
        let cfg = NetworkConfig::default();
        let actor = Actor::new(&cfg, true, &mut rng).unwrap();
        let critic = Critic::new(&cfg, &mut rng).unwrap();
        let ideal = Actor::new(&cfg, false, &mut rng).unwrap();
        let model = DynModel::new(&DynModelConfig::default(), &mut rng).unwrap();
        let stats = SigmaStats {
            min: [0.01; OBS_DIM],
            max: [0.2; OBS_DIM],
            count: 77,
        };
        let wiring = Wiring::new(
            Variant::from_tag("F").unwrap(),
            Some(Reference { ideal, model, stats }),
        )
        .unwrap();
        let ck = robust_checkpoint("fp", &actor, &critic, &wiring);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let (a2, w2) = policy_from_checkpoint(&back).unwrap();
        assert_eq!(a2, actor);
        assert_eq!(w2, wiring);
        assert_eq!(get_critic(&back, "critic").unwrap(), critic);
    }
}
