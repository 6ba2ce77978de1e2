//! Model checkpoints: one section per parameter, buffer and momentum slot,
//! plus a `meta` text section of `key=value` lines.

use std::collections::BTreeMap;
use std::path::Path;

use sfda_tensor::Real;

use super::container::{Container, Section};
use crate::error::{CoreError, Result};
use crate::model::{Buffer, ModelState, Param, ParamGroup};

const PARAM: &str = "param";
const BUFFER: &str = "buffer";
const MOMENTUM: &str = "momentum";
const FROZEN: &str = "frozen";
pub const META: &str = "meta";

/// Parsed checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub state: ModelState<T>,
    pub meta: BTreeMap<String, String>,
}

pub fn meta_text(meta: &BTreeMap<String, String>) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CoreError::InvalidInput(format!("meta line without '=': {l}")))
        })
        .collect()
}

pub fn to_container<T: Real>(state: &ModelState<T>, meta: &BTreeMap<String, String>) -> Result<Container> {
    let mut c = Container::new();
    c.push(Section::text(META, &meta_text(meta)))?;
    let frozen: Vec<usize> = state.params().iter().map(|p| p.frozen as usize).collect();
    c.push(Section::labels(FROZEN, &frozen))?;
    for p in state.params() {
        c.push(Section::tensor(format!("{PARAM}:{}:{}", p.group.tag(), p.name), &p.value))?;
    }
    for b in state.buffers() {
        c.push(Section::tensor(format!("{BUFFER}:{}", b.name), &b.value))?;
    }
    for (p, m) in state.params().iter().zip(state.momentum()) {
        if let Some(m) = m {
            c.push(Section::tensor(format!("{MOMENTUM}:{}", p.name), m))?;
        }
    }
    Ok(c)
}

pub fn from_container<T: Real>(c: &Container) -> Result<Checkpoint<T>> {
    let meta = parse_meta(&c.require(META)?.to_text()?)?;
    let frozen = c.require(FROZEN)?.to_labels()?;
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    let mut momentum = BTreeMap::new();
    for s in c.sections() {
        let mut parts = s.name.splitn(3, ':');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(PARAM), Some(tag), Some(name)) => {
                let group = ParamGroup::from_tag(tag)
                    .ok_or_else(|| CoreError::InvalidInput(format!("unknown parameter group {tag}")))?;
                params.push(Param {
                    name: name.to_string(),
                    group,
                    value: s.to_tensor()?,
                    frozen: false,
                });
            }
            (Some(BUFFER), Some(name), None) => buffers.push(Buffer {
                name: name.to_string(),
                value: s.to_tensor()?,
            }),
            (Some(MOMENTUM), Some(name), None) => {
                momentum.insert(name.to_string(), s.to_tensor()?);
            }
            _ if s.name == META || s.name == FROZEN => {}
            _ => return Err(CoreError::InvalidInput(format!("unexpected checkpoint section {}", s.name))),
        }
    }
    if frozen.len() != params.len() {
        return Err(CoreError::InvalidInput(format!(
            "{} frozen flags for {} parameters",
            frozen.len(),
            params.len()
        )));
    }
    params.iter_mut().zip(&frozen).for_each(|(p, &f)| p.frozen = f != 0);
    let mut state = ModelState::from_parts(params, buffers)?;
    for (name, m) in momentum {
        let i = state
            .param_index(&name)
            .ok_or_else(|| CoreError::InvalidInput(format!("momentum for unknown parameter {name}")))?;
        state.momentum_mut()[i] = Some(m);
    }
    Ok(Checkpoint { state, meta })
}

pub fn save<T: Real>(path: impl AsRef<Path>, state: &ModelState<T>, meta: &BTreeMap<String, String>) -> Result<()> {
    to_container(state, meta)?.save(path)
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{BackboneConfig, Model};

    #[test]
    fn round_trip_is_bitwise() {
        let bb = BackboneConfig::toy(3);
        let mut model = Model::<f32>::new(bb.clone(), Model::<f32>::toy_adm(&bb), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        model.state.set_frozen(ParamGroup::Adm, true);
        let first = model.state.params()[0].value.clone();
        model.state.momentum_mut()[0] = Some(first.map(|v| v * 0.5));
        let meta = BTreeMap::from([("stage".to_string(), "source".to_string())]);
        let c = to_container(&model.state, &meta).unwrap();
        let back: Checkpoint<f32> = from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.meta, meta);
        for (a, b) in model.state.params().iter().zip(back.state.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.frozen, b.frozen);
            let bits = |t: &sfda_tensor::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.state, model.state);
    }
}
