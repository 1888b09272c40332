use convsink::analyzer::AttnMap;
use convsink::tasks::TrainingSample;

use crate::error::Result;
use crate::model::Transformer;
use crate::params::Scalar;

/// Attention probabilities of every head on `sample`, for the sink analyzer.
pub fn attention_map<T: Scalar>(model: &Transformer<T>, sample: &TrainingSample) -> Result<AttnMap> {
    let (_, attn) = model.forward_with_attention(&sample.ids, &sample.mask)?;
    let weights = attn.iter().flatten().flat_map(|h| h.iter().map(|w| w.to_f64().unwrap())).collect();
    Ok(AttnMap::new(model.config.n_layers, model.config.n_heads, weights, sample.seg.clone())?)
}
