//! Function masking: bijective renaming of function and parameter names to
//! random identifiers, so that tool selection has to rely on descriptions.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MaskError;
use crate::schema::{ArgAssignment, CallSequence, FunctionCall, Query, ToolUniverse};

pub const MASKED_NAME_LEN: usize = 8;

const FIRST: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const REST: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Forward mapping original → masked. Functions left unmasked map to
/// themselves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMap {
    pub seed: u64,
    pub functions: IndexMap<String, String>,
    /// Keyed by the original function name.
    pub params: IndexMap<String, IndexMap<String, String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl MaskMap {
    pub fn function_forward(&self, name: &str) -> Option<&str> {
        self.functions.get(name).map(String::as_str)
    }

    pub fn function_inverse(&self, masked: &str) -> Option<&str> {
        self.functions
            .iter()
            .find(|(_, m)| m.as_str() == masked)
            .map(|(orig, _)| orig.as_str())
    }

    /// Masked names that differ from their original.
    pub fn masked_function_names(&self) -> impl Iterator<Item = &str> {
        self.functions
            .iter()
            .filter(|(o, m)| o != m)
            .map(|(_, m)| m.as_str())
    }
}

fn random_identifier(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::with_capacity(MASKED_NAME_LEN);
    s.push(FIRST[rng.random_range(0..FIRST.len())] as char);
    for _ in 1..MASKED_NAME_LEN {
        s.push(REST[rng.random_range(0..REST.len())] as char);
    }
    s
}

fn fresh_identifier(
    rng: &mut ChaCha8Rng,
    reserved: &HashSet<String>,
    used: &HashSet<String>,
) -> String {
    loop {
        let candidate = random_identifier(rng);
        if !reserved.contains(&candidate) && !used.contains(&candidate) {
            return candidate;
        }
    }
}

/// Masks every function of `universe`.
pub fn mask_universe(universe: &ToolUniverse, seed: u64) -> (ToolUniverse, MaskMap) {
    mask_universe_with(universe, seed, 1.0)
}

/// Masks each function (name and parameters together) with probability
/// `probability`; deterministic under `seed`.
pub fn mask_universe_with(
    universe: &ToolUniverse,
    seed: u64,
    probability: f64,
) -> (ToolUniverse, MaskMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reserved: HashSet<String> = HashSet::new();
    for f in &universe.functions {
        reserved.insert(f.name.clone());
        for p in &f.params {
            reserved.insert(p.name.clone());
        }
    }

    let mut map = MaskMap {
        seed,
        functions: IndexMap::new(),
        params: IndexMap::new(),
    };
    let mut used_funcs: HashSet<String> = HashSet::new();
    let mut masked = universe.clone();

    for func in masked.functions.iter_mut() {
        let selected = probability >= 1.0 || rng.random::<f64>() < probability;
        let original = func.name.clone();
        let new_name = if selected {
            fresh_identifier(&mut rng, &reserved, &used_funcs)
        } else {
            original.clone()
        };
        used_funcs.insert(new_name.clone());

        let mut pmap = IndexMap::new();
        let mut used_params: HashSet<String> = HashSet::new();
        for p in func.params.iter_mut() {
            let new_param = if selected {
                fresh_identifier(&mut rng, &reserved, &used_params)
            } else {
                p.name.clone()
            };
            used_params.insert(new_param.clone());
            pmap.insert(p.name.clone(), new_param.clone());
            p.name = new_param;
        }
        func.name = new_name.clone();
        map.functions.insert(original.clone(), new_name);
        map.params.insert(original, pmap);
    }
    (masked, map)
}

/// Renames functions and argument names of `seq`; values are untouched.
pub fn remap_sequence(
    seq: &CallSequence,
    map: &MaskMap,
    direction: Direction,
) -> Result<CallSequence, MaskError> {
    let calls = seq
        .calls
        .iter()
        .map(|call| remap_call(call, map, direction))
        .collect::<Result<_, _>>()?;
    Ok(CallSequence { calls })
}

fn remap_call(
    call: &FunctionCall,
    map: &MaskMap,
    direction: Direction,
) -> Result<FunctionCall, MaskError> {
    let unknown = || MaskError::UnknownName(call.name.clone());
    let (new_name, original) = match direction {
        Direction::Forward => (
            map.function_forward(&call.name).ok_or_else(unknown)?,
            call.name.as_str(),
        ),
        Direction::Inverse => {
            let orig = map.function_inverse(&call.name).ok_or_else(unknown)?;
            (orig, orig)
        }
    };
    let params = map.params.get(original).ok_or_else(unknown)?;
    let args = call
        .args
        .iter()
        .map(|arg| {
            let renamed = match direction {
                Direction::Forward => params.get(&arg.name).cloned(),
                Direction::Inverse => params
                    .iter()
                    .find(|(_, m)| **m == arg.name)
                    .map(|(o, _)| o.clone()),
            };
            renamed
                .map(|name| ArgAssignment::new(name, arg.value.clone()))
                .ok_or_else(|| MaskError::UnknownName(arg.name.clone()))
        })
        .collect::<Result<_, _>>()?;
    Ok(FunctionCall {
        name: new_name.to_string(),
        args,
    })
}

/// Masks a query's universe and forward-remaps its ground truths.
pub fn mask_query(q: &Query, seed: u64, probability: f64) -> Result<(Query, MaskMap), MaskError> {
    let (universe, map) = mask_universe_with(&q.universe, seed, probability);
    let ground_truths = q
        .ground_truths
        .iter()
        .map(|g| remap_sequence(g, &map, Direction::Forward))
        .collect::<Result<_, _>>()?;
    Ok((
        Query {
            id: q.id.clone(),
            text: q.text.clone(),
            universe,
            ground_truths,
            category: q.category,
        },
        map,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{FunctionSpec, ParamKind, ParamSpec};
    use serde_json::json;

    fn universe() -> ToolUniverse {
        ToolUniverse::new(vec![
            FunctionSpec::new("get_weather", "weather")
                .with_param(ParamSpec::new("city", ParamKind::String, true))
                .with_param(ParamSpec::new("unit", ParamKind::String, false)),
            FunctionSpec::new("get_time", "time").with_param(ParamSpec::new(
                "city",
                ParamKind::String,
                true,
            )),
            FunctionSpec::new("ping", "no params"),
        ])
    }

    #[test]
    fn deterministic_under_seed() {
        let u = universe();
        assert_eq!(mask_universe(&u, 42), mask_universe(&u, 42));
    }

    #[test]
    fn shared_param_names_get_distinct_masks_and_no_collisions() {
        let (masked, map) = mask_universe(&universe(), 7);
        let a = &map.params["get_weather"]["city"];
        let b = &map.params["get_time"]["city"];
        assert_ne!(a, b);
        assert!(masked.validate().is_ok());
        for f in &masked.functions {
            assert_eq!(f.name.len(), MASKED_NAME_LEN);
            assert!(f.name.chars().next().unwrap().is_ascii_lowercase());
            assert!(f
                .name
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit()));
        }
        // descriptions and kinds untouched
        assert_eq!(masked.functions[0].description, "weather");
        assert_eq!(masked.functions[0].params[0].kind, ParamKind::String);
    }

    #[test]
    fn seed_change_alters_names() {
        let (_, a) = mask_universe(&universe(), 1);
        let (_, b) = mask_universe(&universe(), 2);
        assert!(a
            .functions
            .values()
            .zip(b.functions.values())
            .any(|(x, y)| x != y));
    }

    #[test]
    fn round_trip_three_calls() {
        let u = universe();
        let (_, map) = mask_universe(&u, 3);
        let seq = CallSequence::new(vec![
            FunctionCall::new("get_weather")
                .with_arg("unit", json!("c"))
                .with_arg("city", json!("Oslo")),
            FunctionCall::new("get_time").with_arg("city", json!("Lima")),
            FunctionCall::new("ping"),
        ]);
        let fwd = remap_sequence(&seq, &map, Direction::Forward).unwrap();
        assert_ne!(fwd, seq);
        assert_eq!(fwd.calls[0].args[0].value, json!("c"));
        assert_eq!(remap_sequence(&fwd, &map, Direction::Inverse).unwrap(), seq);
    }

    #[test]
    fn hallucinated_name_is_unknown() {
        let (_, map) = mask_universe(&universe(), 3);
        let seq = CallSequence::new(vec![FunctionCall::new("zzzzzzzz")]);
        assert_eq!(
            remap_sequence(&seq, &map, Direction::Inverse),
            Err(MaskError::UnknownName("zzzzzzzz".into()))
        );
    }

    #[test]
    fn empty_sequence_maps_to_empty() {
        let (_, map) = mask_universe(&universe(), 3);
        let out = remap_sequence(&CallSequence::empty(), &map, Direction::Forward).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn zero_probability_is_identity() {
        let u = universe();
        let (masked, map) = mask_universe_with(&u, 9, 0.0);
        assert_eq!(masked, u);
        assert_eq!(map.masked_function_names().count(), 0);
    }

    #[test]
    fn map_serializes_for_audit() {
        let (_, map) = mask_universe(&universe(), 5);
        let v = serde_json::to_value(&map).unwrap();
        assert_eq!(v["seed"], json!(5));
        assert!(v["functions"]["get_weather"].is_string());
        assert!(v["params"]["get_time"]["city"].is_string());
        let back: MaskMap = serde_json::from_value(v).unwrap();
        assert_eq!(back, map);
    }
}
