//! Class prototypes and the server's pooled Gaussian class statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::split::ClassPrototypes;
use crate::tensor::Mlp;

/// Sufficient statistics of one class's embeddings on one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalClassStats {
    pub class: usize,
    pub count: usize,
    pub embedding_sum: Vec<f64>,
    pub embedding_sq_sum: Vec<f64>,
}

impl LocalClassStats {
    /// Mean embedding `p_{i,l}`.
    pub fn prototype(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.embedding_sum.iter().map(|s| s / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototype {
    pub class: usize,
    pub prototype: Vec<f64>,
    pub contributing_clients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClassStats {
    pub class: usize,
    pub mu: Vec<f64>,
    pub sigma_diag: Vec<f64>,
}

/// One entry per class present in `samples`, in class order.
pub fn compute_local_prototypes(theta: &Mlp, samples: &[Sample]) -> Result<Vec<LocalClassStats>> {
    let d = theta.output_dim();
    let mut acc: BTreeMap<usize, LocalClassStats> = BTreeMap::new();
    for s in samples {
        let z = theta.predict(&s.features)?;
        let entry = acc.entry(s.label).or_insert_with(|| LocalClassStats {
            class: s.label,
            count: 0,
            embedding_sum: vec![0.0; d],
            embedding_sq_sum: vec![0.0; d],
        });
        entry.count += 1;
        for ((sum, sq), v) in entry
            .embedding_sum
            .iter_mut()
            .zip(entry.embedding_sq_sum.iter_mut())
            .zip(&z)
        {
            *sum += v;
            *sq += v * v;
        }
    }
    Ok(acc.into_values().collect())
}

/// Uploads keyed by client id. Iteration is in id order, which makes every
/// server-side fold independent of arrival order.
pub type ClientUploads<'a> = BTreeMap<usize, &'a [LocalClassStats]>;

fn check_upload(client: usize, s: &LocalClassStats, dim: &mut Option<usize>) -> Result<()> {
    if s.count == 0 {
        return Err(Error::contract(format!(
            "client {client} uploaded class {} with zero count",
            s.class
        )));
    }
    if s.embedding_sum.len() != s.embedding_sq_sum.len() {
        return Err(Error::contract(format!(
            "client {client} class {} has mismatched sum lengths",
            s.class
        )));
    }
    match *dim {
        None => *dim = Some(s.embedding_sum.len()),
        Some(d) if d != s.embedding_sum.len() => {
            return Err(Error::contract(format!(
                "client {client} uploaded {}-dim stats, expected {d}",
                s.embedding_sum.len()
            )))
        }
        _ => {}
    }
    Ok(())
}

/// Unweighted mean over contributing clients of their class prototypes.
/// Classes no participant holds are absent from the output.
pub fn aggregate_global_prototypes(uploads: &ClientUploads<'_>) -> Result<Vec<GlobalPrototype>> {
    let mut dim = None;
    let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (&client, stats) in uploads {
        for s in stats.iter() {
            check_upload(client, s, &mut dim)?;
            let p = s.prototype();
            let entry = acc
                .entry(s.class)
                .or_insert_with(|| (vec![0.0; p.len()], 0));
            for (a, v) in entry.0.iter_mut().zip(&p) {
                *a += v;
            }
            entry.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(class, (sum, n))| GlobalPrototype {
            class,
            prototype: sum.into_iter().map(|v| v / n as f64).collect(),
            contributing_clients: n,
        })
        .collect())
}

/// `mu = p̄_l`; `sigma_diag` is the pooled population variance of all
/// uploaded embeddings of the class around their pooled mean.
pub fn estimate_gaussian_stats(
    uploads: &ClientUploads<'_>,
    prototypes: &[GlobalPrototype],
) -> Result<Vec<GaussianClassStats>> {
    let mut dim = None;
    let mut pooled: BTreeMap<usize, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (&client, stats) in uploads {
        for s in stats.iter() {
            check_upload(client, s, &mut dim)?;
            let d = s.embedding_sum.len();
            let entry = pooled
                .entry(s.class)
                .or_insert_with(|| (0, vec![0.0; d], vec![0.0; d]));
            entry.0 += s.count;
            for (a, v) in entry.1.iter_mut().zip(&s.embedding_sum) {
                *a += v;
            }
            for (a, v) in entry.2.iter_mut().zip(&s.embedding_sq_sum) {
                *a += v;
            }
        }
    }
    prototypes
        .iter()
        .map(|gp| {
            let (n, sum, sq) = pooled.get(&gp.class).ok_or_else(|| {
                Error::contract(format!("class {} has a prototype but no uploads", gp.class))
            })?;
            if gp.prototype.len() != sum.len() {
                return Err(Error::contract(format!(
                    "prototype for class {} does not match upload width",
                    gp.class
                )));
            }
            let n = *n as f64;
            let sigma_diag = sum
                .iter()
                .zip(sq)
                .map(|(&s, &q)| {
                    if n <= 1.0 {
                        return Ok(0.0);
                    }
                    let mean = s / n;
                    let var = (q - n * mean * mean) / n;
                    let slack = 1e-9 * (q / n).abs().max(1.0);
                    if var < -slack {
                        Err(Error::contract(format!(
                            "negative pooled variance {var} for class {}",
                            gp.class
                        )))
                    } else if var <= slack {
                        Ok(0.0)
                    } else {
                        Ok(var)
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(GaussianClassStats {
                class: gp.class,
                mu: gp.prototype.clone(),
                sigma_diag,
            })
        })
        .collect()
}

/// Server-side store of the latest statistics per class. Classes missing
/// from a round keep their previous entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub prototypes: BTreeMap<usize, GlobalPrototype>,
    pub gaussians: BTreeMap<usize, GaussianClassStats>,
}

impl PrototypeStore {
    pub fn update(&mut self, prototypes: Vec<GlobalPrototype>, gaussians: Vec<GaussianClassStats>) {
        for p in prototypes {
            self.prototypes.insert(p.class, p);
        }
        for g in gaussians {
            self.gaussians.insert(g.class, g);
        }
    }

    /// The class set `P` for which prototypes are available.
    pub fn available_classes(&self) -> Vec<usize> {
        self.prototypes.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// One line per class: `class,count,mu_1..mu_d,sigma_1..sigma_d`, where
    /// count is the number of contributing clients.
    pub fn export_snapshot(&self) -> String {
        let mut out = String::new();
        for (class, g) in &self.gaussians {
            let count = self
                .prototypes
                .get(class)
                .map_or(0, |p| p.contributing_clients);
            let _ = write!(out, "{class},{count}");
            for v in g.mu.iter().chain(&g.sigma_diag) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_snapshot(text: &str) -> Result<Self> {
        let mut store = PrototypeStore::default();
        let mut dim = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::parse(format!("snapshot line {}: {what}", lineno + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 2 || !(fields.len() - 2).is_multiple_of(2) {
                return Err(bad("expected class, count and an even number of values"));
            }
            let class: usize = fields[0].parse().map_err(|_| bad("bad class"))?;
            let count: usize = fields[1].parse().map_err(|_| bad("bad count"))?;
            let values = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<f64>>>()?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad("non-finite value"));
            }
            let d = values.len() / 2;
            if *dim.get_or_insert(d) != d {
                return Err(bad("dimension differs from earlier lines"));
            }
            let (mu, sigma) = values.split_at(d);
            if sigma.iter().any(|&s| s < 0.0) {
                return Err(bad("negative variance"));
            }
            if store.gaussians.contains_key(&class) {
                return Err(bad("duplicate class"));
            }
            store.prototypes.insert(
                class,
                GlobalPrototype {
                    class,
                    prototype: mu.to_vec(),
                    contributing_clients: count,
                },
            );
            store.gaussians.insert(
                class,
                GaussianClassStats {
                    class,
                    mu: mu.to_vec(),
                    sigma_diag: sigma.to_vec(),
                },
            );
        }
        Ok(store)
    }
}

impl ClassPrototypes for PrototypeStore {
    fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.prototypes.get(&class).map(|p| p.prototype.as_slice())
    }
}
