//! Plain-text run configuration: one `key = value` per line with dotted
//! keys, `#` comments, and command-line `key=value` overrides applied last.

use crate::adapter::AdapterInit;
use crate::backbone::{BackboneSpec, Family, FreezeMode, FreezePolicy, HeadKind};
use crate::error::{Error, Result};
use crate::heads::ScoreSupport;
use crate::pretext::PaceConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretextKind {
    /// One segment of the clip plays faster; predict which and how fast.
    SegmentPace,
    /// The whole clip plays at one stride; predict it.
    ClipPace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadChoice {
    /// Distribution over score bins with a Gaussian target of width sigma.
    Distribution { bins: usize, sigma: f64 },
    /// Pairwise difference regressor against exemplars.
    Pairwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneSpec,
    pub adapter_init: AdapterInit,
    pub freeze: FreezePolicy,
    pub pretext: PretextKind,
    pub pace: PaceConfig,
    pub head: HeadChoice,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Pretext samples drawn per video per epoch.
    pub samples_per_video: usize,
    /// Supervised / evaluation clip length (contiguous frames).
    pub clip_len: usize,
    /// Spatial crop fed to the network.
    pub crop: usize,
    /// Exemplars per query for pairwise evaluation; 0 = all.
    pub max_exemplars: usize,
    /// Backbone freeze policy during fine-tuning; heads always train.
    /// `none_trainable` turns the stage into a linear probe of the head.
    pub finetune_mode: FreezeMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let backbone = BackboneSpec::residual_default();
        let crop = backbone.input_size;
        RunConfig {
            backbone,
            adapter_init: AdapterInit::Identity,
            freeze: FreezePolicy::new(FreezeMode::AdaptersOnly),
            pretext: PretextKind::SegmentPace,
            pace: PaceConfig::default(),
            head: HeadChoice::Distribution { bins: 5, sigma: 1.0 },
            lr: 1e-3,
            momentum: 0.9,
            epochs: 8,
            batch_size: 16,
            samples_per_video: 10,
            clip_len: 32,
            crop,
            max_exemplars: 8,
            finetune_mode: FreezeMode::Full,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.pace.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("optimizer.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("optimizer.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_video == 0 {
            return Err(Error::config("train.epochs, train.batch_size and train.samples_per_video must be >= 1"));
        }
        if self.clip_len == 0 || self.crop == 0 {
            return Err(Error::config("train.clip_len and train.crop must be >= 1"));
        }
        if let HeadChoice::Distribution { bins, sigma } = self.head {
            if bins < 2 {
                return Err(Error::config(format!("head.bins must be >= 2, got {bins}")));
            }
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::config(format!("head.sigma must be positive, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Head used by the supervised fine-tuning stage.
    pub fn finetune_head_kind(&self) -> HeadKind {
        match self.head {
            HeadChoice::Distribution { bins, .. } => HeadKind::ScoreBins { bins },
            HeadChoice::Pairwise => HeadKind::PairDiff,
        }
    }

    /// Head used by the self-supervised pretext stage.
    pub fn pretext_head_kind(&self) -> HeadKind {
        match self.pretext {
            PretextKind::SegmentPace => HeadKind::SegmentPace {
                num_speeds: self.pace.speeds.len(),
                num_segments: self.pace.num_segments,
            },
            PretextKind::ClipPace => HeadKind::Pace { num_speeds: self.pace.speeds.len() },
        }
    }

    /// The score support the distribution head decodes over (0..=4 scale).
    pub fn support(&self) -> Result<ScoreSupport> {
        match self.head {
            HeadChoice::Distribution { bins, .. } => ScoreSupport::new(0.0, 4.0, bins),
            HeadChoice::Pairwise => Ok(ScoreSupport::severity_0_to_4()),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.head {
            HeadChoice::Distribution { sigma, .. } => sigma,
            HeadChoice::Pairwise => 1.0,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::config(format!("key {key}: expected an integer, got {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| Error::config(format!("key {key}: expected an integer, got {v:?}")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::config(format!("key {key}: expected a number, got {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!("key {key}: expected true or false, got {v:?}"))),
    }
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::config(format!("key {key}: bad list element {p:?}"))))
        .collect()
}

fn parse_freeze_mode(key: &str, v: &str) -> Result<FreezeMode> {
    match v {
        "adapters_only" => Ok(FreezeMode::AdaptersOnly),
        "bn_affine_only" => Ok(FreezeMode::BnAffineOnly),
        "full" => Ok(FreezeMode::Full),
        "none_trainable" => Ok(FreezeMode::NoneTrainable),
        _ => Err(Error::config(format!(
            "key {key}: expected adapters_only, bn_affine_only, full or none_trainable, got {v:?}"
        ))),
    }
}

fn freeze_mode_name(mode: FreezeMode) -> &'static str {
    match mode {
        FreezeMode::AdaptersOnly => "adapters_only",
        FreezeMode::BnAffineOnly => "bn_affine_only",
        FreezeMode::Full => "full",
        FreezeMode::NoneTrainable => "none_trainable",
    }
}

/// Parse config text plus overrides into a fully resolved [`RunConfig`].
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {}: expected key = value, got {raw:?}", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?}: expected key=value")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    resolve(map)
}

/// Parse a config file (and overrides); a missing file is a config error.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides)
}

fn resolve(mut map: BTreeMap<String, String>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut crop_set = false;
    let mut take = |k: &str| map.remove(k);

    if let Some(v) = take("backbone.family") {
        cfg.backbone.family = match v.as_str() {
            "residual3d" => Family::Residual3d,
            "inception3d" => Family::Inception3d,
            _ => {
                return Err(Error::config(format!(
                    "key backbone.family: expected residual3d or inception3d, got {v:?}"
                )))
            }
        };
        // The family default channel plan follows the family unless given.
        if cfg.backbone.family == Family::Inception3d {
            cfg.backbone.stage_channels = BackboneSpec::inception_default().stage_channels;
        }
    }
    if let Some(v) = take("backbone.stage_channels") {
        cfg.backbone.stage_channels = parse_usize_list("backbone.stage_channels", &v)?;
    }
    if let Some(v) = take("backbone.blocks_per_stage") {
        cfg.backbone.blocks_per_stage = parse_usize_list("backbone.blocks_per_stage", &v)?;
    }
    if let Some(v) = take("backbone.input_frames") {
        cfg.backbone.input_frames = parse_usize("backbone.input_frames", &v)?;
    }
    if let Some(v) = take("backbone.input_size") {
        cfg.backbone.input_size = parse_usize("backbone.input_size", &v)?;
    }
    if let Some(v) = take("backbone.adapter_lambda") {
        cfg.backbone.adapter_lambda = parse_usize("backbone.adapter_lambda", &v)?;
    }
    if let Some(v) = take("adapter.init") {
        cfg.adapter_init = match v.as_str() {
            "identity" => AdapterInit::Identity,
            "random" => AdapterInit::Random,
            _ => return Err(Error::config(format!("key adapter.init: expected identity or random, got {v:?}"))),
        };
    }
    if let Some(v) = take("freeze.mode") {
        cfg.freeze.mode = parse_freeze_mode("freeze.mode", &v)?;
    }
    if let Some(v) = take("freeze.heads_trainable") {
        cfg.freeze.heads_trainable = parse_bool("freeze.heads_trainable", &v)?;
    }
    if let Some(v) = take("pretext.kind") {
        cfg.pretext = match v.as_str() {
            "segment_pace" => PretextKind::SegmentPace,
            "clip_pace" => PretextKind::ClipPace,
            _ => {
                return Err(Error::config(format!(
                    "key pretext.kind: expected segment_pace or clip_pace, got {v:?}"
                )))
            }
        };
    }
    if let Some(v) = take("pretext.clip_len") {
        cfg.pace.clip_len = parse_usize("pretext.clip_len", &v)?;
    }
    if let Some(v) = take("pretext.num_segments") {
        cfg.pace.num_segments = parse_usize("pretext.num_segments", &v)?;
    }
    if let Some(v) = take("pretext.speeds") {
        cfg.pace.speeds = parse_usize_list("pretext.speeds", &v)?;
    }
    if let Some(v) = take("head.kind") {
        cfg.head = match v.as_str() {
            "distribution" => HeadChoice::Distribution { bins: 5, sigma: 1.0 },
            "pairwise" => HeadChoice::Pairwise,
            _ => return Err(Error::config(format!("key head.kind: expected distribution or pairwise, got {v:?}"))),
        };
    }
    if let Some(v) = take("head.bins") {
        let bins = parse_usize("head.bins", &v)?;
        match &mut cfg.head {
            HeadChoice::Distribution { bins: b, .. } => *b = bins,
            HeadChoice::Pairwise => return Err(Error::config("key head.bins: only valid with head.kind = distribution")),
        }
    }
    if let Some(v) = take("head.sigma") {
        let sigma = parse_f64("head.sigma", &v)?;
        match &mut cfg.head {
            HeadChoice::Distribution { sigma: s, .. } => *s = sigma,
            HeadChoice::Pairwise => return Err(Error::config("key head.sigma: only valid with head.kind = distribution")),
        }
    }
    if let Some(v) = take("optimizer.lr") {
        cfg.lr = parse_f64("optimizer.lr", &v)?;
    }
    if let Some(v) = take("optimizer.momentum") {
        cfg.momentum = parse_f64("optimizer.momentum", &v)?;
    }
    if let Some(v) = take("train.epochs") {
        cfg.epochs = parse_usize("train.epochs", &v)?;
    }
    if let Some(v) = take("train.batch_size") {
        cfg.batch_size = parse_usize("train.batch_size", &v)?;
    }
    if let Some(v) = take("train.samples_per_video") {
        cfg.samples_per_video = parse_usize("train.samples_per_video", &v)?;
    }
    if let Some(v) = take("train.clip_len") {
        cfg.clip_len = parse_usize("train.clip_len", &v)?;
    }
    if let Some(v) = take("train.crop") {
        cfg.crop = parse_usize("train.crop", &v)?;
        crop_set = true;
    }
    if let Some(v) = take("eval.max_exemplars") {
        cfg.max_exemplars = parse_usize("eval.max_exemplars", &v)?;
    }
    if let Some(v) = take("finetune.mode") {
        cfg.finetune_mode = parse_freeze_mode("finetune.mode", &v)?;
    }
    if let Some(v) = take("seed") {
        cfg.seed = parse_u64("seed", &v)?;
    }

    if let Some(k) = map.keys().next() {
        return Err(Error::config(format!("unknown key: {k}")));
    }
    if !crop_set {
        cfg.crop = cfg.backbone.input_size;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Render the fully resolved config back to parseable text, for the
/// provenance copy written into every run directory.
pub fn render_config(cfg: &RunConfig) -> String {
    let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    kv(
        "backbone.family",
        match cfg.backbone.family {
            Family::Residual3d => "residual3d".into(),
            Family::Inception3d => "inception3d".into(),
        },
    );
    kv("backbone.stage_channels", list(&cfg.backbone.stage_channels));
    kv("backbone.blocks_per_stage", list(&cfg.backbone.blocks_per_stage));
    kv("backbone.input_frames", cfg.backbone.input_frames.to_string());
    kv("backbone.input_size", cfg.backbone.input_size.to_string());
    kv("backbone.adapter_lambda", cfg.backbone.adapter_lambda.to_string());
    kv(
        "adapter.init",
        match cfg.adapter_init {
            AdapterInit::Identity => "identity".into(),
            AdapterInit::Random => "random".into(),
        },
    );
    kv("freeze.mode", freeze_mode_name(cfg.freeze.mode).into());
    kv("freeze.heads_trainable", cfg.freeze.heads_trainable.to_string());
    kv(
        "pretext.kind",
        match cfg.pretext {
            PretextKind::SegmentPace => "segment_pace".into(),
            PretextKind::ClipPace => "clip_pace".into(),
        },
    );
    kv("pretext.clip_len", cfg.pace.clip_len.to_string());
    kv("pretext.num_segments", cfg.pace.num_segments.to_string());
    kv("pretext.speeds", list(&cfg.pace.speeds));
    match cfg.head {
        HeadChoice::Distribution { bins, sigma } => {
            kv("head.kind", "distribution".into());
            kv("head.bins", bins.to_string());
            kv("head.sigma", format!("{sigma}"));
        }
        HeadChoice::Pairwise => kv("head.kind", "pairwise".into()),
    }
    kv("optimizer.lr", format!("{}", cfg.lr));
    kv("optimizer.momentum", format!("{}", cfg.momentum));
    kv("train.epochs", cfg.epochs.to_string());
    kv("train.batch_size", cfg.batch_size.to_string());
    kv("train.samples_per_video", cfg.samples_per_video.to_string());
    kv("train.clip_len", cfg.clip_len.to_string());
    kv("train.crop", cfg.crop.to_string());
    kv("eval.max_exemplars", cfg.max_exemplars.to_string());
    kv("finetune.mode", freeze_mode_name(cfg.finetune_mode).into());
    kv("seed", cfg.seed.to_string());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_the_documented_defaults() {
        let cfg = parse_config_str("", &[]).unwrap();
        assert_eq!(cfg.epochs, 8);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.pace.clip_len, 32);
        assert_eq!(cfg.pace.num_segments, 4);
        assert_eq!(cfg.pace.speeds, vec![1, 2, 3, 4]);
        assert_eq!(cfg.backbone.adapter_lambda, 4);
        assert_eq!(cfg.head, HeadChoice::Distribution { bins: 5, sigma: 1.0 });
        assert_eq!(cfg.crop, cfg.backbone.input_size);
    }

    #[test]
    fn file_keys_and_overrides_layer_correctly() {
        let text = "train.epochs = 3\noptimizer.lr = 0.01  # comment\n\n# full-line comment\nseed = 11\n";
        let cfg = parse_config_str(text, &["train.epochs=1".into()]).unwrap();
        assert_eq!(cfg.epochs, 1, "override beats the file");
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = parse_config_str("foo = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("unknown key: foo"), "{err}");
        let err = parse_config_str("", &["bar.baz=2".into()]).unwrap_err();
        assert!(err.to_string().contains("unknown key: bar.baz"));
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = parse_config_str("train.epochs = soon\n", &[]).unwrap_err();
        assert!(err.to_string().contains("train.epochs"), "{err}");
        let err = parse_config_str("backbone.family = resnet\n", &[]).unwrap_err();
        assert!(err.to_string().contains("backbone.family"));
        let err = parse_config_str("freeze.heads_trainable = yes\n", &[]).unwrap_err();
        assert!(err.to_string().contains("freeze.heads_trainable"));
    }

    #[test]
    fn malformed_lines_report_their_line_number() {
        let err = parse_config_str("train.epochs = 2\nnot a key value\n", &[]).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(parse_config_str("optimizer.lr = 0\n", &[]).is_err());
        assert!(parse_config_str("train.epochs = 0\n", &[]).is_err());
        assert!(parse_config_str("pretext.speeds = 2,1\n", &[]).is_err());
        assert!(parse_config_str("head.kind = pairwise\nhead.bins = 5\n", &[]).is_err());
    }

    #[test]
    fn finetune_mode_accepts_the_freeze_vocabulary() {
        let cfg = parse_config_str("finetune.mode = none_trainable\n", &[]).unwrap();
        assert_eq!(cfg.finetune_mode, FreezeMode::NoneTrainable);
        let cfg = parse_config_str("finetune.mode = adapters_only\n", &[]).unwrap();
        assert_eq!(cfg.finetune_mode, FreezeMode::AdaptersOnly);
        let err = parse_config_str("finetune.mode = heads\n", &[]).unwrap_err();
        assert!(err.to_string().contains("finetune.mode"), "{err}");
    }

    #[test]
    fn rendered_config_round_trips() {
        let cfg = parse_config_str(
            "backbone.family = inception3d\ntrain.epochs = 2\nhead.kind = pairwise\ntrain.crop = 24\n",
            &["seed=99".into()],
        )
        .unwrap();
        let text = render_config(&cfg);
        let again = parse_config_str(&text, &[]).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn family_switch_updates_default_channel_plan() {
        let cfg = parse_config_str("backbone.family = inception3d\n", &[]).unwrap();
        assert_eq!(cfg.backbone.stage_channels, BackboneSpec::inception_default().stage_channels);
        // Explicit channels still win.
        let cfg = parse_config_str("backbone.family = inception3d\nbackbone.stage_channels = 8,16\n", &[]).unwrap();
        assert_eq!(cfg.backbone.stage_channels, vec![8, 16]);
    }
}
