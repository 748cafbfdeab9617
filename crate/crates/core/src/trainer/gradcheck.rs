use crate::data::{mask_with_rng, pack, Document, MaskingConfig, PackedBatch};
use crate::encoder::{EncoderInput, EncoderModel, ModelConfig};
use crate::error::Result;
use crate::rng;
use crate::tensor::{compare_central_differences, GradCheckConfig, GradCheckReport, Graph};
use rand::Rng;

fn loss_of(model: &EncoderModel<f64>, input: &EncoderInput, labels: &[i64]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let h = model.encode(&mut g, &bound, input)?;
    let z = model.logits(&mut g, &bound, h)?;
    let loss = g.cross_entropy(z, labels)?;
    Ok(g.value(loss).data()[0])
}

/// Central-difference check of the MLM loss gradient for every parameter
/// tensor of `model`, in canonical order.
pub fn model_grad_check(
    model: &EncoderModel<f64>,
    input: &EncoderInput,
    labels: &[i64],
    cfg: &GradCheckConfig,
) -> Result<Vec<(String, GradCheckReport)>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let h = model.encode(&mut g, &bound, input)?;
    let z = model.logits(&mut g, &bound, h)?;
    let loss = g.cross_entropy(z, labels)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .into_iter()
        .map(|v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();
    drop(g);

    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let report = compare_central_differences(&analytic[k], cfg, |i, delta| {
            let orig = probe.parameters_mut()[k].1.data()[i];
            probe.parameters_mut()[k].1.data_mut()[i] = orig + delta;
            let l = loss_of(&probe, input, labels);
            probe.parameters_mut()[k].1.data_mut()[i] = orig;
            l
        })?;
        out.push((name, report));
    }
    Ok(out)
}

/// The toy gradient-check fixture: depth 2, width 32, 2 heads, vocab 256,
/// one packed row holding two documents, 20% masking.
pub fn toy_fixture(seed: u64) -> Result<(EncoderModel<f64>, EncoderInput, Vec<i64>)> {
    let model = EncoderModel::new(ModelConfig::new(2, 32, 2, 256, 64), seed)?;
    let mut r = rng::stream(seed, "gradcheck", &[]);
    let docs: Vec<Result<Document>> = [5usize, 7]
        .iter()
        .enumerate()
        .map(|(i, &n)| Ok(Document::new("toy", i as u64, (0..n).map(|_| r.random_range(5..256)).collect())))
        .collect();
    let rows = pack(docs, 16)?.collect::<Result<Vec<_>>>()?;
    let mut batch = PackedBatch::from_rows(rows, 16)?;
    mask_with_rng(&mut batch, &MaskingConfig::default(), &mut r)?;
    let input = batch.encoder_input()?;
    Ok((model, input, batch.labels))
}
