//! Documentation of every config-file key, rendered into `--help`.

use serde_json::Value;
use tofe_core::config::ExperimentConfig;

pub const DOCS: &[(&str, &str)] = &[
    ("schedule.total_steps", "number of diffusion timesteps T"),
    ("schedule.beta_start", "first beta of the linear schedule"),
    ("schedule.beta_end", "last beta of the linear schedule"),
    ("denoiser.height", "latent height; must equal dataset.image_size"),
    ("denoiser.width", "latent width; must equal dataset.image_size"),
    ("denoiser.time_dim", "width of the sinusoidal timestep embedding"),
    ("denoiser.cond_dim", "width of a condition embedding"),
    ("denoiser.hidden", "hidden layer width"),
    ("denoiser.hidden_layers", "number of hidden layers"),
    ("denoiser.activation", "hidden activation: silu | identity"),
    ("models.training_images", "real images every denoiser is trained on"),
    ("models.data_seed", "seed of the denoiser training images"),
    ("models.bank_seed", "seed of the per-class condition embeddings"),
    ("models.extractor_seed", "model seed of the feature-extractor denoiser"),
    ("training.iterations", "denoiser optimizer steps"),
    ("training.batch_size", "denoiser minibatch size"),
    ("training.learning_rate", "denoiser learning rate"),
    ("training.optimizer", "denoiser optimizer: adam | sgd"),
    ("training.momentum", "momentum, used by sgd only"),
    ("training.grad_clip", "global gradient-norm clip"),
    ("training.seed", "shared denoiser training seed, mixed with each model seed"),
    ("training.cond_drop_prob", "probability of training on the null embedding"),
    ("dataset.image_size", "image side length in pixels"),
    ("dataset.train_real", "real training images per training generator"),
    ("dataset.train_fake", "fake training images per training generator"),
    ("dataset.test_real", "real test images per generator"),
    ("dataset.test_fake", "fake test images per generator"),
    ("dataset.real_seed", "seed of the real images in the corpus"),
    ("dataset.train_generators", "ids of the detector's training generators; empty = first three"),
    ("generators[].id", "generator id, unique"),
    ("generators[].kind", "sampler: ddim_sampler | ddpm_ancestral"),
    ("generators[].steps", "sampling steps"),
    ("generators[].guidance_w", "classifier-free guidance weight"),
    ("generators[].model_seed", "training seed of the generator's denoiser"),
    ("generators[].sampler_seed_base", "base of the per-image sampling seeds"),
    ("tofe.eta", "embedding gradient-descent learning rate"),
    ("tofe.iters", "gradient steps per timestep"),
    ("tofe.steps", "inversion transitions"),
    ("tofe.guidance_w", "guidance weight of the reconstruction step"),
    ("tofe.stride", "timesteps per transition; unset = total_steps / steps"),
    ("tofe.init", "starting embedding: \"null_text\" or { custom = [..] }"),
    ("classifier.learning_rate", "detector learning rate"),
    ("classifier.iterations", "detector optimizer steps"),
    ("classifier.batch_size", "detector minibatch size"),
    ("classifier.seed", "detector initialization and batching seed"),
    ("classifier.hidden", "detector hidden width"),
    ("classifier.optimizer", "detector optimizer: adam | sgd"),
    ("analysis.tsne.perplexity", "t-SNE perplexity"),
    ("analysis.tsne.iters", "t-SNE iterations"),
    ("analysis.tsne.seed", "t-SNE initialization seed"),
    ("analysis.tsne.learning_rate", "t-SNE learning rate"),
    ("analysis.tsne.early_exaggeration", "t-SNE early exaggeration factor"),
    ("analysis.tsne.exaggeration_iters", "t-SNE iterations with exaggeration"),
    ("analysis.js_bins", "JS divergence histogram bins per axis"),
    ("analysis.per_class", "reals and fakes per generator in the separation analysis"),
    ("analysis.reconstruction_images", "test images reconstructed for PSNR/SSIM"),
    ("robustness.kinds", "corruptions: gaussian_noise, gaussian_blur, crop_resize, jpeg_like"),
    ("robustness.max_severity", "highest corruption level (0-5)"),
    ("robustness.seed", "corruption noise seed"),
    ("ablation.eta", "tofe.eta values to sweep"),
    ("ablation.iters", "tofe.iters values to sweep"),
    ("ablation.steps", "tofe.steps values to sweep"),
    ("ablation.per_class", "reals and fakes per generator for each ablation value"),
];

/// Flattens the default config into `(key, default)` pairs. Keys inside
/// arrays of tables are written `name[].key` and carry no default.
pub fn default_keys() -> Vec<(String, Option<String>)> {
    let value = serde_json::to_value(ExperimentConfig::default()).expect("config serializes");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, Option<String>)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) if items.first().is_some_and(Value::is_object) => {
            let mut fields = Vec::new();
            flatten("", &items[0], &mut fields);
            out.extend(fields.into_iter().map(|(k, _)| (format!("{prefix}[].{k}"), None)));
        }
        Value::Null => out.push((prefix.to_string(), Some("unset".into()))),
        // f32 fields arrive widened; print them in their own shortest form.
        Value::Number(n) if n.is_f64() => {
            let v = n.as_f64().expect("f64 number");
            let shown = if (v as f32) as f64 == v { (v as f32).to_string() } else { v.to_string() };
            out.push((prefix.to_string(), Some(shown)));
        }
        other => out.push((prefix.to_string(), Some(other.to_string()))),
    }
}

pub fn help_text() -> String {
    let keys = default_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut text = String::from(
        "Config file keys (TOML; every key optional, unknown keys rejected).\n\
         The default generators are the ten-entry table g00..g09.\n",
    );
    for (key, default) in keys {
        let doc = DOCS.iter().find(|(k, _)| *k == key).map_or("", |(_, d)| d);
        match default {
            Some(d) => text.push_str(&format!("  {key:<width$}  {doc} [default: {d}]\n")),
            None => text.push_str(&format!("  {key:<width$}  {doc}\n")),
        }
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn every_config_key_is_documented() {
        let keys: BTreeSet<String> = default_keys().into_iter().map(|(k, _)| k).collect();
        let docs: BTreeSet<String> = DOCS.iter().map(|(k, _)| k.to_string()).collect();
        assert_eq!(keys, docs);
    }

    #[test]
    fn defaults_use_short_float_forms() {
        let keys = default_keys();
        let eta = keys.iter().find(|(k, _)| k == "tofe.eta").unwrap();
        assert_eq!(eta.1.as_deref(), Some("0.01"));
        let stride = keys.iter().find(|(k, _)| k == "tofe.stride").unwrap();
        assert_eq!(stride.1.as_deref(), Some("unset"));
    }
}
