//! Command-line flags generated from the pipeline configuration keys, so
//! that every key can be set as `--key value` as well as from a file.

use std::path::PathBuf;

use anchorsync::pipeline::PipelineConfig;
use anchorsync::{Error, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};

#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    /// File of key=value lines.
    pub file: Option<PathBuf>,
    /// Flag overrides in key order.
    pub overrides: Vec<(&'static str, String)>,
}

impl ConfigArgs {
    /// Applies the file, then the flags.
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(path) = &self.file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

fn flag(key: &'static str) -> String {
    key.replace('_', "-")
}

fn describe(key: &str) -> &'static str {
    match key {
        "k" => "Anchor interval in frames",
        "steps" => "Denoising steps",
        "beta_start" => "First value of the linear noise schedule",
        "beta_end" => "Last value of the linear noise schedule",
        "s_t" => "Text guidance scale",
        "s_j" => "Joint (structural) guidance scale",
        "attn_ratio" => "Fraction of editing steps with attention injection",
        "conv_ratio" => "Fraction of editing steps with conv feature injection",
        "control_strength" => "Scale of the edge and flow control residual",
        "canny_sigma" => "Gaussian blur before edge detection",
        "canny_low" => "Low hysteresis threshold",
        "canny_high" => "High hysteresis threshold",
        "flow_lambda" => "Flow smoothness weight",
        "flow_iters" => "Flow iterations",
        "refinements" => "Fixed-point refinements per inversion step",
        "fusion" => "Average shared anchors across pairs (true or false)",
        "joint" => "Structural condition: none or source",
        "inv_text" => "Inversion condition: 8 comma-separated values or none",
        "edit_text" => "Editing condition: 8 comma-separated values or none",
        "denoiser" => "Anchor denoiser: pairnet or analytic",
        "interp" => "Interpolation denoiser: prior or pairnet",
        "mixture_variance" => "Component variance of the analytic denoiser",
        "width" => "Frame width (taken from the input when there is one)",
        "height" => "Frame height (taken from the input when there is one)",
        "seed" => "Noise seed",
        "model_seed" => "Weight seed of the seeded networks",
        _ => "",
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        if let Some(p) = m.get_one::<PathBuf>("config") {
            self.file = Some(p.clone());
        }
        for key in PipelineConfig::KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                self.overrides.push((key, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Read key=value configuration lines"),
        );
        PipelineConfig::KEYS.iter().fold(cmd, |cmd, &key| {
            let long = flag(key);
            let arg = Arg::new(key)
                .long(long.clone())
                .value_name("VALUE")
                .help(describe(key))
                .help_heading("Configuration");
            cmd.arg(if long == key { arg } else { arg.alias(key) })
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
