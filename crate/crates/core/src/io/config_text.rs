//! Line-oriented `key = value` model configs.
//!
//! ```text
//! # start from a built-in grid, then override
//! variant = B2
//! stage1.attn = linear:7
//! num_classes = 100
//! ```
//!
//! Model keys: `variant`, `name`, `num_classes`, `in_channels`, `ope`,
//! `cffn`, `pool_refine`. Stage keys are `stageN.S`, `.C`, `.L`, `.attn`,
//! `.N` and `.E`, numbered from 1. Without `variant`, every stage from 1 up
//! to the highest one mentioned must set all six keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::{config_for, AttentionKind, ModelConfig, StageConfig, Variant};
use crate::error::{Error, Result};

const STAGE_KEYS: [&str; 6] = ["S", "C", "L", "attn", "N", "E"];

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn positive(line: usize, key: &str, v: &str) -> Result<usize> {
    match v.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(parse_err(line, format!("`{key}` needs a positive integer, got `{v}`"))),
    }
}

fn boolean(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(parse_err(line, format!("`{key}` needs true or false, got `{v}`"))),
    }
}

#[derive(Default)]
struct StagePatch {
    first_line: usize,
    stride: Option<usize>,
    channels: Option<usize>,
    depth: Option<usize>,
    attn: Option<AttentionKind>,
    heads: Option<usize>,
    expansion: Option<usize>,
}

impl StagePatch {
    fn apply(&self, s: &mut StageConfig) {
        s.stride = self.stride.unwrap_or(s.stride);
        s.channels = self.channels.unwrap_or(s.channels);
        s.depth = self.depth.unwrap_or(s.depth);
        s.attn = self.attn.unwrap_or(s.attn);
        s.heads = self.heads.unwrap_or(s.heads);
        s.expansion = self.expansion.unwrap_or(s.expansion);
    }

    fn complete(&self, index: usize) -> Result<StageConfig> {
        let missing = |k: &str| parse_err(self.first_line, format!("stage{index}.{k} is not set"));
        Ok(StageConfig {
            stride: self.stride.ok_or_else(|| missing("S"))?,
            channels: self.channels.ok_or_else(|| missing("C"))?,
            depth: self.depth.ok_or_else(|| missing("L"))?,
            attn: self.attn.ok_or_else(|| missing("attn"))?,
            heads: self.heads.ok_or_else(|| missing("N"))?,
            expansion: self.expansion.ok_or_else(|| missing("E"))?,
        })
    }
}

/// Parses a config and validates the result. Invalid architectures are
/// reported as [`Error::InvalidConfig`]; everything else as [`Error::Parse`].
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut variant: Option<Variant> = None;
    let mut name = None;
    let mut num_classes = None;
    let mut in_channels = None;
    let mut toggles: [Option<bool>; 3] = [None; 3];
    let mut stages: BTreeMap<usize, StagePatch> = BTreeMap::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected `key = value`, got `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if let Some(prev) = seen.insert(key.to_string(), line) {
            return Err(parse_err(line, format!("`{key}` already set on line {prev}")));
        }
        match key {
            "variant" => {
                variant = Some(
                    value
                        .parse()
                        .map_err(|_| parse_err(line, format!("unknown variant `{value}`")))?,
                )
            }
            "name" => {
                if value.is_empty() {
                    return Err(parse_err(line, "`name` must not be empty"));
                }
                name = Some(value.to_string());
            }
            "num_classes" => num_classes = Some(positive(line, key, value)?),
            "in_channels" => in_channels = Some(positive(line, key, value)?),
            "ope" => toggles[0] = Some(boolean(line, key, value)?),
            "cffn" => toggles[1] = Some(boolean(line, key, value)?),
            "pool_refine" => toggles[2] = Some(boolean(line, key, value)?),
            _ => {
                let (stage, field) = key
                    .strip_prefix("stage")
                    .and_then(|rest| rest.split_once('.'))
                    .ok_or_else(|| parse_err(line, format!("unknown key `{key}`")))?;
                let index: usize = match stage.parse() {
                    Ok(n) if (1..=ModelConfig::MAX_STAGES).contains(&n) => n,
                    _ => {
                        return Err(parse_err(
                            line,
                            format!("stage number in `{key}` must be 1..={}", ModelConfig::MAX_STAGES),
                        ))
                    }
                };
                let patch = stages.entry(index).or_insert_with(|| StagePatch {
                    first_line: line,
                    ..StagePatch::default()
                });
                match field {
                    "S" => patch.stride = Some(positive(line, key, value)?),
                    "C" => patch.channels = Some(positive(line, key, value)?),
                    "L" => patch.depth = Some(positive(line, key, value)?),
                    "N" => patch.heads = Some(positive(line, key, value)?),
                    "E" => patch.expansion = Some(positive(line, key, value)?),
                    "attn" => patch.attn = Some(value.parse().map_err(|m: String| parse_err(line, m))?),
                    _ => {
                        return Err(parse_err(
                            line,
                            format!(
                                "unknown stage key `{field}` (expected one of {})",
                                STAGE_KEYS.join(", ")
                            ),
                        ))
                    }
                }
            }
        }
    }

    let mut cfg = match variant {
        Some(v) => {
            let mut cfg = config_for(v);
            for (&index, patch) in &stages {
                let Some(s) = cfg.stages.get_mut(index - 1) else {
                    return Err(parse_err(patch.first_line, format!("{v} has no stage {index}")));
                };
                patch.apply(s);
            }
            cfg
        }
        None => {
            let count = stages.keys().next_back().copied().unwrap_or(0);
            if count == 0 {
                return Err(parse_err(last_line.max(1), "no `variant` and no stages defined"));
            }
            let mut list = Vec::with_capacity(count);
            for index in 1..=count {
                let Some(patch) = stages.get(&index) else {
                    return Err(parse_err(
                        stages[&count].first_line,
                        format!("stage {index} is missing"),
                    ));
                };
                list.push(patch.complete(index)?);
            }
            ModelConfig {
                name: "custom".into(),
                stages: list,
                num_classes: 1000,
                in_channels: 3,
                overlapping_patch_embed: true,
                conv_ffn: true,
                pool_refine: true,
            }
        }
    };
    if let Some(n) = name {
        cfg.name = n;
    }
    cfg.num_classes = num_classes.unwrap_or(cfg.num_classes);
    cfg.in_channels = in_channels.unwrap_or(cfg.in_channels);
    cfg.overlapping_patch_embed = toggles[0].unwrap_or(cfg.overlapping_patch_embed);
    cfg.conv_ffn = toggles[1].unwrap_or(cfg.conv_ffn);
    cfg.pool_refine = toggles[2].unwrap_or(cfg.pool_refine);
    cfg.validate()?;
    Ok(cfg)
}

/// Fully explicit text form; `parse_config(&render_config(c))` returns `c`.
pub fn render_config(cfg: &ModelConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "name = {}", cfg.name);
    let _ = writeln!(out, "num_classes = {}", cfg.num_classes);
    let _ = writeln!(out, "in_channels = {}", cfg.in_channels);
    let _ = writeln!(out, "ope = {}", cfg.overlapping_patch_embed);
    let _ = writeln!(out, "cffn = {}", cfg.conv_ffn);
    let _ = writeln!(out, "pool_refine = {}", cfg.pool_refine);
    for (i, s) in cfg.stages.iter().enumerate() {
        let n = i + 1;
        let _ = writeln!(out);
        let _ = writeln!(out, "stage{n}.S = {}", s.stride);
        let _ = writeln!(out, "stage{n}.C = {}", s.channels);
        let _ = writeln!(out, "stage{n}.L = {}", s.depth);
        let _ = writeln!(out, "stage{n}.attn = {}", s.attn);
        let _ = writeln!(out, "stage{n}.N = {}", s.heads);
        let _ = writeln!(out, "stage{n}.E = {}", s.expansion);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(e: Error) -> usize {
        match e {
            Error::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn variant_only() {
        assert_eq!(parse_config("variant = B0").unwrap(), config_for(Variant::B0));
    }

    #[test]
    fn override_one_stage() {
        let cfg = parse_config("variant = B2\nstage1.attn = linear:7").unwrap();
        let mut expected = config_for(Variant::B2);
        expected.stages[0].attn = AttentionKind::LinearSra { pool_size: 7 };
        assert_eq!(cfg, expected);
    }

    #[test]
    fn negative_channels() {
        assert_eq!(line_of(parse_config("stage1.C = -3").unwrap_err()), 1);
    }

    #[test]
    fn unknown_keys_and_values() {
        assert_eq!(line_of(parse_config("variant = B2\n\nstage1.X = 3").unwrap_err()), 3);
        assert_eq!(line_of(parse_config("# hi\nvariant = B9").unwrap_err()), 2);
        assert_eq!(line_of(parse_config("depth = 3").unwrap_err()), 1);
        assert_eq!(line_of(parse_config("variant = B2\nope = yes").unwrap_err()), 2);
        assert_eq!(line_of(parse_config("variant = B0\nvariant = B1").unwrap_err()), 2);
    }

    #[test]
    fn missing_stage() {
        let text = render_config(&ModelConfig::micro()).replace("stage1.", "stage3.");
        assert!(matches!(parse_config(&text), Err(Error::Parse { .. })));
    }

    #[test]
    fn render_round_trip() {
        for v in Variant::ALL {
            let cfg = config_for(v);
            assert_eq!(parse_config(&render_config(&cfg)).unwrap(), cfg);
        }
        let micro = ModelConfig::micro();
        assert_eq!(parse_config(&render_config(&micro)).unwrap(), micro);
    }

    #[test]
    fn comments_ignored() {
        let cfg = parse_config("# header\nvariant = B1   # inline\n\nnum_classes = 10\n").unwrap();
        assert_eq!(cfg.num_classes, 10);
    }

    #[test]
    fn invalid_architecture() {
        let err = parse_config("variant = B0\nstage1.N = 3").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{err:?}");
    }
}
