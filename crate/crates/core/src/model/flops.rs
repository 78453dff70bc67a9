//! Closed-form parameter and multiply-add counts.

use serde::Serialize;

use super::{Backbone, LammConfig};

/// Multiply-adds for one sample through encoder and decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlopCount {
    pub tokens: usize,
    /// `Σ 3N_i·D`, input projections.
    pub tokenize: usize,
    /// `Σ 3N_i·D`, output projections of the final decoder state.
    pub detokenize: usize,
    pub latent: usize,
    pub control: usize,
    /// Query/key/value/output projections.
    pub attention_projections: usize,
    /// Scores and weighted sums, quadratic in the token count.
    pub attention_scores: usize,
    pub token_mixing: usize,
    pub channel_mlp: usize,
}

impl FlopCount {
    pub fn total(&self) -> usize {
        self.tokenize
            + self.detokenize
            + self.latent
            + self.control
            + self.attention_projections
            + self.attention_scores
            + self.token_mixing
            + self.channel_mlp
    }

    /// Work of the decoder alone (the path exercised by interactive edits).
    pub fn decode_share(&self, c: &LammConfig) -> usize {
        let layers = c.encoder_layers + c.decoder_layers;
        let per_block = |x: usize| x / layers * c.decoder_layers;
        self.detokenize
            + c.dim * c.latent
            + self.control
            + per_block(self.attention_projections)
            + per_block(self.attention_scores)
            + per_block(self.token_mixing)
            + per_block(self.channel_mlp)
    }
}

pub fn count_flops(c: &LammConfig) -> FlopCount {
    let (t, d) = (c.tokens(), c.dim);
    let coords: usize = c.region_sizes.iter().map(|n| 3 * n).sum();
    let control: usize = c
        .control_sizes
        .iter()
        .map(|n| 3 * n * c.control_hidden + c.control_hidden * d)
        .sum();
    let layers = c.encoder_layers + c.decoder_layers;
    let mut f = FlopCount {
        tokens: t,
        tokenize: coords * d,
        detokenize: coords * d,
        latent: 2 * d * c.latent,
        control,
        channel_mlp: layers * 2 * t * d * c.channel_hidden,
        ..Default::default()
    };
    match c.backbone {
        Backbone::Transformer => {
            f.attention_projections = layers * 4 * t * d * d;
            f.attention_scores = layers * 2 * t * t * d;
        }
        Backbone::Mlpmixer => {
            f.token_mixing = layers * 2 * d * t * c.token_hidden;
        }
    }
    f
}

pub fn count_params(c: &LammConfig) -> usize {
    let (t, d) = (c.tokens(), c.dim);
    let k = c.num_regions();
    let coords: usize = c.region_sizes.iter().map(|n| 3 * n).sum();
    let control: usize = c
        .control_sizes
        .iter()
        .map(|n| 3 * n * c.control_hidden + c.control_hidden * d)
        .sum();
    let mlp = |i: usize, h: usize| i * h + h + h * i + i;
    let block = 4 * d
        + match c.backbone {
            Backbone::Transformer => 4 * (d * d + d) + mlp(d, c.channel_hidden),
            Backbone::Mlpmixer => mlp(t, c.token_hidden) + mlp(d, c.channel_hidden),
        };
    2 * coords * d + 2 * d * c.latent + d + k * d + control + (c.encoder_layers + c.decoder_layers) * block
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(backbone: Backbone, regions: Vec<usize>, dim: usize) -> LammConfig {
        let k = regions.len();
        LammConfig {
            control_sizes: vec![5; k],
            region_sizes: regions,
            dim,
            latent: 32,
            encoder_layers: 5,
            decoder_layers: 3,
            backbone,
            heads: 1,
            control_hidden: dim,
            token_hidden: 2 * (k + 1),
            channel_hidden: 4 * dim,
            coord_scale: 1.0,
        }
    }

    #[test]
    fn doubling_width_quadruples_projection_flops() {
        let a = count_flops(&config(Backbone::Transformer, vec![100; 8], 64));
        let b = count_flops(&config(Backbone::Transformer, vec![100; 8], 128));
        assert_eq!(b.attention_projections, 4 * a.attention_projections);
    }

    #[test]
    fn params_linear_in_vertices() {
        let p = |n| count_params(&config(Backbone::Mlpmixer, vec![n; 8], 64));
        assert_eq!(p(200) - p(100), p(300) - p(200));
        assert_eq!(p(200) - p(100), 2 * 8 * 3 * 100 * 64);
    }
}
