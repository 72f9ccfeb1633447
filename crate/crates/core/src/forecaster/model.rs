//! Network assembly: dilated convolutions over the history, a tariff branch
//! that depends on the variant, calendar embeddings and a quantile head.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use tariffshift_autodiff::{glorot_uniform, Graph, Mode, ParameterStore, RunningStats, Tensor, Var};

use super::variant::{ModelDims, ModelVariant};
use super::window::{ForecastWindow, Normalization};
use crate::error::{Error, Result};
use crate::market::{Calendar, Rate};

/// Loss recorded after each training epoch.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_aql: Option<f64>,
}

/// A forecaster and everything needed to reproduce its predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub variant: ModelVariant,
    pub dims: ModelDims,
    pub seed: u64,
    pub params: ParameterStore,
    /// Running statistics of each convolution layer's batch norm.
    pub bn_stats: Vec<RunningStats>,
    pub normalization: BTreeMap<usize, Normalization>,
    pub loss_history: Vec<EpochLog>,
    /// Epoch whose parameters were kept (0 = untrained).
    pub selected_epoch: usize,
}

const CALENDAR_TABLES: [(&str, usize); 3] = [
    ("hour", Calendar::HOURS_OF_DAY),
    ("dow", Calendar::DAYS_OF_WEEK),
    ("month", Calendar::MONTHS),
];

struct Init<'a> {
    store: &'a mut ParameterStore,
    seed: u64,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Result<()> {
        let t = glorot_uniform(shape, fan_in, fan_out, self.seed, name);
        Ok(self.store.insert(name, t)?)
    }

    fn fill(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<()> {
        Ok(self.store.insert(name, Tensor::filled(shape, value))?)
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.weight(&format!("{prefix}.w"), vec![fan_in, fan_out], fan_in, fan_out)?;
        self.fill(&format!("{prefix}.b"), vec![fan_out], 0.0)
    }
}

impl ModelDims {
    /// Width of the tariff context for a variant.
    pub fn context_width(&self, variant: ModelVariant) -> usize {
        match variant {
            ModelVariant::NoX => 0,
            ModelVariant::Ind => self.tariff_embed,
            ModelVariant::FC => self.d,
            ModelVariant::PE => self.d_prime,
            _ => self.d,
        }
    }

    /// Width of the per-hour features entering the head.
    pub fn fused_width(&self, variant: ModelVariant) -> usize {
        self.local_filters
            + self.context_width(variant)
            + 3 * self.calendar_embed
            + usize::from(variant.needs_shift_indicator())
    }

    fn dcnn_channels(&self) -> usize {
        1 + self.tariff_embed + 3 * self.calendar_embed
    }
}

/// Builds an untrained model with seeded initial weights.
pub fn assemble_model(variant: ModelVariant, dims: &ModelDims, seed: u64) -> Result<TrainedModel> {
    dims.validate()?;
    let mut store = ParameterStore::new();
    let mut init = Init {
        store: &mut store,
        seed,
    };
    let (ce, te, d) = (dims.calendar_embed, dims.tariff_embed, dims.d);
    for (name, n) in CALENDAR_TABLES {
        init.dense(&format!("emb.{name}.l1"), n, ce)?;
        init.dense(&format!("emb.{name}.l2"), ce, ce)?;
    }
    init.dense("emb.tariff.l1", 1, te)?;
    init.dense("emb.tariff.l2", te, te)?;

    let (f, w) = (dims.conv_filters, dims.conv_kernel);
    let mut cin = dims.dcnn_channels();
    for i in 0..dims.conv_layers() {
        init.weight(&format!("dcnn.conv{i}.kernel"), vec![f, cin, w], cin * w, f * w)?;
        init.fill(&format!("dcnn.bn{i}.gamma"), vec![f], 1.0)?;
        init.fill(&format!("dcnn.bn{i}.beta"), vec![f], 0.0)?;
        cin = f;
    }
    init.dense("dcnn.cwfc", dims.lookback, dims.cwfc_units)?;
    let (h, lf) = (dims.horizon, dims.local_filters);
    init.weight("dcnn.local.w", vec![h, f, lf], f, lf)?;
    init.fill("dcnn.local.b", vec![h, lf], 0.0)?;

    match variant {
        ModelVariant::NoX | ModelVariant::Ind => {}
        ModelVariant::FC => init.dense("exo.fc", h, h * d)?,
        _ => {}
    }
    if matches!(variant, ModelVariant::PE | ModelVariant::AttPE | ModelVariant::UB) {
        init.dense("exo.pe.theta", te, d)?;
        init.weight("exo.pe.lambda", vec![d, dims.d_prime], d, dims.d_prime)?;
        init.weight("exo.pe.gamma", vec![d, dims.d_prime], d, dims.d_prime)?;
    }
    if variant.uses_attention() {
        let kv_in = if variant == ModelVariant::Att { te + ce } else { te };
        init.dense("exo.att.k", kv_in, d)?;
        init.dense("exo.att.v", kv_in, d)?;
        let q_in = if variant.pe_queries() { dims.d_prime } else { kv_in };
        init.dense("exo.att.q", q_in, d)?;
    }

    let fused = dims.fused_width(variant);
    init.dense("iqn", dims.iqn_basis, fused)?;
    let mut width = fused;
    for (i, &units) in dims.head_units.iter().enumerate() {
        init.dense(&format!("head.l{i}"), width, units)?;
        width = units;
    }
    Ok(TrainedModel {
        variant,
        dims: dims.clone(),
        seed,
        params: store,
        bn_stats: vec![RunningStats::new(f); dims.conv_layers()],
        normalization: BTreeMap::new(),
        loss_history: Vec::new(),
        selected_epoch: 0,
    })
}

/// Permutation-equivariant set layer `sigmoid(x L - 1 maxpool(x) G)` over
/// rows of `x [.., n, d]`, with `L`, `G` of shape `[d, d']`.
pub fn pe_query_net(g: &mut Graph, x: Var, lambda: Var, gamma: Var) -> Result<Var> {
    let own = g.matmul(x, lambda)?;
    let pooled = g.maxpool_rows(x)?;
    let shared = g.matmul(pooled, gamma)?;
    let pre = g.sub(own, shared)?;
    Ok(g.sigmoid(pre)?)
}

/// Scaled dot-product attention over all positions: `q, k, v [b, n, d]`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *g.shape(q).last().unwrap_or(&1);
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax_rows(scores)?;
    Ok(g.bmm(weights, v, false)?)
}

/// Cosine features `cos(pi i q)`, `i = 0..n`, of a quantile level.
pub fn quantile_basis(q: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (PI * i as f64 * q).cos()).collect()
}

fn rate_index(r: f64) -> Result<usize> {
    Rate::from_value(r)
        .map(Rate::index)
        .ok_or_else(|| Error::Data(format!("tariff rate {r} is not one of the three levels")))
}

/// Intermediate tariff-branch tensors of one forward pass.
pub struct ExoParts {
    pub queries: Option<Var>,
    pub context: Option<Var>,
}

pub(crate) struct Forward {
    pub pred: Var,
    pub kernel_l2: Var,
    pub exo: ExoParts,
}

struct Tables {
    calendar: [Var; 3],
    tariff: Var,
}

impl TrainedModel {
    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(&self.params, name)?)
    }

    fn dense(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }

    /// Embedding tables: a one-hidden-layer network evaluated on every
    /// category (or every tariff level), then looked up by index.
    fn tables(&self, g: &mut Graph) -> Result<Tables> {
        let mut calendar = Vec::with_capacity(3);
        for (name, _) in CALENDAR_TABLES {
            let w = self.p(g, &format!("emb.{name}.l1.w"))?;
            let b = self.p(g, &format!("emb.{name}.l1.b"))?;
            let hidden = g.add_bias(w, b)?;
            let hidden = g.relu(hidden)?;
            calendar.push(self.dense(g, hidden, &format!("emb.{name}.l2"))?);
        }
        let levels = g.constant(vec![3, 1], Rate::ALL.map(Rate::value).to_vec())?;
        let hidden = self.dense(g, levels, "emb.tariff.l1")?;
        let hidden = g.relu(hidden)?;
        let tariff = self.dense(g, hidden, "emb.tariff.l2")?;
        Ok(Tables {
            calendar: calendar.try_into().map_err(|_| Error::Config("calendar tables".into()))?,
            tariff,
        })
    }

    fn calendar_features(&self, g: &mut Graph, t: &Tables, cal: &[Calendar]) -> Result<Var> {
        let hour: Vec<usize> = cal.iter().map(|c| c.hour_of_day).collect();
        let dow: Vec<usize> = cal.iter().map(|c| c.day_of_week).collect();
        let month: Vec<usize> = cal.iter().map(|c| c.month).collect();
        let parts = [
            g.gather_rows(t.calendar[0], &hour)?,
            g.gather_rows(t.calendar[1], &dow)?,
            g.gather_rows(t.calendar[2], &month)?,
        ];
        Ok(g.concat(&parts, 1)?)
    }

    fn check_window(&self, w: &ForecastWindow) -> Result<()> {
        let dims = &self.dims;
        if w.lookback() != dims.lookback
            || w.horizon() != dims.horizon
            || w.past_tariffs.len() != dims.lookback
            || w.past_calendar.len() != dims.lookback
            || w.future_calendar.len() != dims.horizon
            || w.target.len() != dims.horizon
        {
            return Err(Error::Data(format!(
                "window of {}+{} hours for a {}+{} hour model",
                w.lookback(),
                w.horizon(),
                dims.lookback,
                dims.horizon
            )));
        }
        if self.variant.needs_shift_indicator() {
            match &w.future_shift_indicator {
                Some(ind) if ind.len() == dims.horizon => {}
                Some(_) => return Err(Error::Data("shift indicator length differs from horizon".into())),
                None => {
                    return Err(Error::Data(format!(
                        "{} needs shift indicators, window for consumer {} has none",
                        self.variant, w.consumer_id
                    )))
                }
            }
        }
        Ok(())
    }

    /// Builds the forward graph for a batch; `quantiles[i]` conditions
    /// sample `i`. Predictions are `[batch, horizon]` on the normalized scale.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        batch: &[&ForecastWindow],
        quantiles: &[f64],
        mode: Mode,
        stats: &mut [RunningStats],
    ) -> Result<Forward> {
        let dims = &self.dims;
        let (b, l, h) = (batch.len(), dims.lookback, dims.horizon);
        if b == 0 || quantiles.len() != b {
            return Err(Error::Data(format!("{b} windows with {} quantile levels", quantiles.len())));
        }
        for w in batch {
            self.check_window(w)?;
        }
        let tables = self.tables(g)?;

        // history channels: consumption, tariff embedding, calendar embeddings
        let cons: Vec<f64> = batch.iter().flat_map(|w| w.past_consumption.iter().copied()).collect();
        let cons = g.constant(vec![b * l, 1], cons)?;
        let past_idx = batch
            .iter()
            .flat_map(|w| w.past_tariffs.iter().map(|&r| rate_index(r)))
            .collect::<Result<Vec<_>>>()?;
        let past_tariff = g.gather_rows(tables.tariff, &past_idx)?;
        let past_cal: Vec<Calendar> = batch.iter().flat_map(|w| w.past_calendar.iter().copied()).collect();
        let past_cal = self.calendar_features(g, &tables, &past_cal)?;
        let x = g.concat(&[cons, past_tariff, past_cal], 1)?;
        let x = g.reshape(x, vec![b, l, dims.dcnn_channels()])?;
        let mut x = g.transpose(x)?;

        let mut kernel_l2 = g.constant(vec![1], vec![0.0])?;
        for (i, &dil) in dims.dilations.iter().enumerate() {
            let k = self.p(g, &format!("dcnn.conv{i}.kernel"))?;
            x = g.conv1d_causal(x, k, dil)?;
            let gamma = self.p(g, &format!("dcnn.bn{i}.gamma"))?;
            let beta = self.p(g, &format!("dcnn.bn{i}.beta"))?;
            x = g.batchnorm(x, gamma, beta, mode, &mut stats[i])?;
            x = g.relu(x)?;
            let sq = g.sum_squares(k)?;
            kernel_l2 = g.add(kernel_l2, sq)?;
        }
        let x = self.dense(g, x, "dcnn.cwfc")?;
        let x = g.transpose(x)?;
        let lw = self.p(g, "dcnn.local.w")?;
        let lb = self.p(g, "dcnn.local.b")?;
        let local = g.local_dense(x, lw, lb)?;
        let local = g.relu(local)?;

        let fut_cal: Vec<Calendar> = batch.iter().flat_map(|w| w.future_calendar.iter().copied()).collect();
        let fut_cal_feat = self.calendar_features(g, &tables, &fut_cal)?;
        let fut_cal_feat = g.reshape(fut_cal_feat, vec![b, h, 3 * dims.calendar_embed])?;

        let exo = self.tariff_branch(g, &tables, batch, &fut_cal)?;
        let mut parts = vec![local];
        parts.extend(exo.context);
        parts.push(fut_cal_feat);
        if self.variant.needs_shift_indicator() {
            let ind: Vec<f64> = batch
                .iter()
                .flat_map(|w| w.future_shift_indicator.as_deref().unwrap_or_default().iter().copied())
                .collect();
            parts.push(g.constant(vec![b, h, 1], ind)?);
        }
        let fused = g.concat(&parts, 2)?;

        let basis: Vec<f64> = quantiles
            .iter()
            .flat_map(|&q| quantile_basis(q, dims.iqn_basis))
            .collect();
        let basis = g.constant(vec![b, dims.iqn_basis], basis)?;
        let qe = self.dense(g, basis, "iqn")?;
        let qe = g.relu(qe)?;
        let qe = g.reshape(qe, vec![b, 1, dims.fused_width(self.variant)])?;
        let mut y = g.mul(fused, qe)?;

        let layers = dims.head_units.len();
        for i in 0..layers {
            y = self.dense(g, y, &format!("head.l{i}"))?;
            if i + 1 < layers {
                y = g.relu(y)?;
            }
        }
        let pred = g.reshape(y, vec![b, h])?;
        Ok(Forward { pred, kernel_l2, exo })
    }

    fn tariff_branch(
        &self,
        g: &mut Graph,
        tables: &Tables,
        batch: &[&ForecastWindow],
        fut_cal: &[Calendar],
    ) -> Result<ExoParts> {
        let dims = &self.dims;
        let (b, h, d) = (batch.len(), dims.horizon, dims.d);
        let none = ExoParts {
            queries: None,
            context: None,
        };
        if self.variant == ModelVariant::NoX {
            return Ok(none);
        }
        if self.variant == ModelVariant::FC {
            let rates: Vec<f64> = batch.iter().flat_map(|w| w.future_tariffs.iter().copied()).collect();
            let rates = g.constant(vec![b, h], rates)?;
            let y = self.dense(g, rates, "exo.fc")?;
            let y = g.relu(y)?;
            let y = g.reshape(y, vec![b, h, d])?;
            return Ok(ExoParts {
                queries: None,
                context: Some(y),
            });
        }
        let idx = batch
            .iter()
            .flat_map(|w| w.future_tariffs.iter().map(|&r| rate_index(r)))
            .collect::<Result<Vec<_>>>()?;
        let emb = g.gather_rows(tables.tariff, &idx)?;
        let emb = g.reshape(emb, vec![b, h, dims.tariff_embed])?;
        if self.variant == ModelVariant::Ind {
            return Ok(ExoParts {
                queries: None,
                context: Some(emb),
            });
        }
        let pe = if matches!(self.variant, ModelVariant::PE | ModelVariant::AttPE | ModelVariant::UB) {
            let x = self.dense(g, emb, "exo.pe.theta")?;
            let x = g.relu(x)?;
            let lambda = self.p(g, "exo.pe.lambda")?;
            let gamma = self.p(g, "exo.pe.gamma")?;
            Some(pe_query_net(g, x, lambda, gamma)?)
        } else {
            None
        };
        if self.variant == ModelVariant::PE {
            return Ok(ExoParts {
                queries: pe,
                context: pe,
            });
        }
        let kv_in = if self.variant == ModelVariant::Att {
            let hours: Vec<usize> = fut_cal.iter().map(|c| c.hour_of_day).collect();
            let hod = g.gather_rows(tables.calendar[0], &hours)?;
            let hod = g.reshape(hod, vec![b, h, dims.calendar_embed])?;
            g.concat(&[emb, hod], 2)?
        } else {
            emb
        };
        let k = self.dense(g, kv_in, "exo.att.k")?;
        let v = self.dense(g, kv_in, "exo.att.v")?;
        let q = match pe {
            Some(pe) => self.dense(g, pe, "exo.att.q")?,
            None => self.dense(g, kv_in, "exo.att.q")?,
        };
        let context = attention(g, q, k, v)?;
        Ok(ExoParts {
            queries: Some(q),
            context: Some(context),
        })
    }

    /// Tariff-branch queries and context `[horizon, width]` for one window
    /// in eval mode, when the variant has them.
    pub fn tariff_parts(&self, window: &ForecastWindow) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let mut g = Graph::new();
        let mut stats = self.bn_stats.clone();
        let fwd = self.forward(&mut g, &[window], &[0.5], Mode::Eval, &mut stats)?;
        let drop_batch = |g: &Graph, v: Var| {
            let s = g.shape(v);
            Tensor::new(s[1..].to_vec(), g.value(v).to_vec()).map_err(Error::from)
        };
        let q = fwd.exo.queries.map(|v| drop_batch(&g, v)).transpose()?;
        let c = fwd.exo.context.map(|v| drop_batch(&g, v)).transpose()?;
        Ok((q, c))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn norm_for(&self, consumer_id: usize) -> Result<Normalization> {
        self.normalization
            .get(&consumer_id)
            .copied()
            .ok_or_else(|| Error::Data(format!("model has no normalization for consumer {consumer_id}")))
    }
}
