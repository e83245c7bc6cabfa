//! JSON file formats for mixtures, stream checkpoints and dictionaries.
//!
//! Mixture file:
//! `{"d", "K", "weights": [..], "components": [{"mu": [..], "sigma": [..]}],
//! "labels"?: [[..]], "meta": {"seed"?, "created"?}}`.
//! A checkpoint adds `n_seen, K_min, K_max, delta_K, seed, step_index,
//! n_effective, em_tol, forgetting?` to the mixture fields. A dictionary is
//! `{"C", "K", "d", "n_c", "beta", "atoms": [mixture with labels],
//! "Lambda": [[..]], "sigma_floor": [..], "meta": {"seed"?, "iters"?}}`.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every parameter bit for bit. Unknown keys are rejected and
//! every error names the offending field path.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dadil::Dictionary;
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::gmm::{Gmm, LabeledGmm};
use crate::online::{StreamConfig, StreamState};

/// Provenance fields; `created` is the only one allowed to vary between
/// otherwise identical runs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
}

/// A mixture as stored on disk, with or without class distributions.
#[derive(Debug, Clone, PartialEq)]
pub enum Mixture {
    Plain(Gmm),
    Labeled(LabeledGmm),
}

impl Mixture {
    pub fn gmm(&self) -> &Gmm {
        match self {
            Mixture::Plain(g) => g,
            Mixture::Labeled(l) => l.gmm(),
        }
    }

    pub fn labeled(&self) -> Option<&LabeledGmm> {
        match self {
            Mixture::Plain(_) => None,
            Mixture::Labeled(l) => Some(l),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentDoc {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureDoc {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    components: Vec<ComponentDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    meta: Meta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<f64>,
    components: Vec<ComponentDoc>,
    #[serde(default)]
    meta: Meta,
    n_seen: u64,
    #[serde(rename = "K_min")]
    k_min: usize,
    #[serde(rename = "K_max")]
    k_max: usize,
    #[serde(rename = "delta_K")]
    delta_k: usize,
    seed: u64,
    step_index: u64,
    n_effective: f64,
    em_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryDoc {
    #[serde(rename = "C")]
    c: usize,
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    n_c: usize,
    beta: f64,
    atoms: Vec<MixtureDoc>,
    #[serde(rename = "Lambda")]
    lambda: Vec<Vec<f64>>,
    sigma_floor: Vec<f64>,
    #[serde(default)]
    meta: Meta,
}

/// A dictionary file: the dictionary plus the label weight it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryFile {
    pub dictionary: Dictionary,
    pub beta: f64,
    pub meta: Meta,
}

fn parse<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::schema(if path.is_empty() { ".".into() } else { path }, e.into_inner().to_string())
    })
}

fn render<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("documents hold only finite numbers");
    s.push('\n');
    s
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Schema { .. } => e,
        other => Error::schema(path, other.to_string()),
    }
}

fn check_len(path: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::schema(path, format!("expected length {expected}, got {got}")))
    }
}

fn components_doc(g: &Gmm) -> Vec<ComponentDoc> {
    g.components().iter().map(|c| ComponentDoc { mu: c.mu().to_vec(), sigma: c.sigma().to_vec() }).collect()
}

fn mixture_doc(m: &Mixture, meta: Meta) -> MixtureDoc {
    let g = m.gmm();
    MixtureDoc {
        d: g.dim(),
        k: g.k(),
        weights: g.weights().to_vec(),
        components: components_doc(g),
        labels: m.labeled().map(|l| l.labels().to_vec()),
        meta,
    }
}

fn build_gmm(prefix: &str, d: usize, k: usize, weights: Vec<f64>, components: Vec<ComponentDoc>) -> Result<Gmm> {
    if d == 0 {
        return Err(Error::schema(format!("{prefix}d"), "dimension must be at least 1"));
    }
    if k == 0 {
        return Err(Error::schema(format!("{prefix}K"), "need at least one component"));
    }
    check_len(&format!("{prefix}weights"), k, weights.len())?;
    check_len(&format!("{prefix}components"), k, components.len())?;
    let comps = components
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let path = format!("{prefix}components[{i}]");
            check_len(&format!("{path}.mu"), d, c.mu.len())?;
            check_len(&format!("{path}.sigma"), d, c.sigma.len())?;
            DiagGaussian::new(c.mu, c.sigma).map_err(at(&path))
        })
        .collect::<Result<Vec<_>>>()?;
    Gmm::new(weights, comps).map_err(at(&format!("{prefix}weights")))
}

fn build_mixture(prefix: &str, doc: MixtureDoc) -> Result<(Mixture, Meta)> {
    let gmm = build_gmm(prefix, doc.d, doc.k, doc.weights, doc.components)?;
    let mixture = match doc.labels {
        None => Mixture::Plain(gmm),
        Some(labels) => {
            let path = format!("{prefix}labels");
            check_len(&path, doc.k, labels.len())?;
            Mixture::Labeled(LabeledGmm::new(gmm, labels).map_err(at(&path))?)
        }
    };
    Ok((mixture, doc.meta))
}

pub fn mixture_to_string(m: &Mixture, meta: &Meta) -> String {
    render(&mixture_doc(m, meta.clone()))
}

pub fn mixture_from_str(text: &str) -> Result<(Mixture, Meta)> {
    build_mixture("", parse(text)?)
}

pub fn write_mixture(path: &Path, m: &Mixture, meta: &Meta) -> Result<()> {
    Ok(fs::write(path, mixture_to_string(m, meta))?)
}

pub fn read_mixture(path: &Path) -> Result<(Mixture, Meta)> {
    mixture_from_str(&fs::read_to_string(path)?)
}

pub fn checkpoint_to_string(state: &StreamState, meta: &Meta) -> String {
    let g = state.model();
    let cfg = state.config();
    render(&CheckpointDoc {
        d: g.dim(),
        k: g.k(),
        weights: g.weights().to_vec(),
        components: components_doc(g),
        meta: meta.clone(),
        n_seen: state.n_seen(),
        k_min: cfg.k_min,
        k_max: cfg.k_max,
        delta_k: cfg.delta_k,
        seed: cfg.seed,
        step_index: state.step_index(),
        n_effective: state.n_effective(),
        em_tol: cfg.em_tol,
        forgetting: cfg.forgetting,
    })
}

/// Restores a stream exactly as it was saved; feeding it the remaining
/// batches gives the same model as an uninterrupted run.
pub fn checkpoint_from_str(text: &str) -> Result<(StreamState, Meta)> {
    let doc: CheckpointDoc = parse(text)?;
    let model = build_gmm("", doc.d, doc.k, doc.weights, doc.components)?;
    let config = StreamConfig {
        k_min: doc.k_min,
        k_max: doc.k_max,
        delta_k: doc.delta_k,
        seed: doc.seed,
        forgetting: doc.forgetting,
        em_tol: doc.em_tol,
    };
    config.validate().map_err(at("K_min"))?;
    if model.k() > config.k_max {
        return Err(Error::schema("K", format!("{} components exceed K_max = {}", model.k(), config.k_max)));
    }
    if !(doc.n_effective > 0.0 && doc.n_effective.is_finite()) {
        return Err(Error::schema("n_effective", "must be positive"));
    }
    let state = StreamState { model, n_seen: doc.n_seen, n_effective: doc.n_effective, step_index: doc.step_index, config };
    Ok((state, doc.meta))
}

pub fn write_checkpoint(path: &Path, state: &StreamState, meta: &Meta) -> Result<()> {
    Ok(fs::write(path, checkpoint_to_string(state, meta))?)
}

pub fn read_checkpoint(path: &Path) -> Result<(StreamState, Meta)> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

pub fn dictionary_to_string(dict: &Dictionary, beta: f64, meta: &Meta) -> String {
    render(&DictionaryDoc {
        c: dict.n_atoms(),
        k: dict.n_components(),
        d: dict.dim(),
        n_c: dict.n_classes(),
        beta,
        atoms: dict.atoms().iter().map(|a| mixture_doc(&Mixture::Labeled(a.clone()), Meta::default())).collect(),
        lambda: dict.lambda().to_vec(),
        sigma_floor: dict.sigma_floor().to_vec(),
        meta: meta.clone(),
    })
}

pub fn dictionary_from_str(text: &str) -> Result<DictionaryFile> {
    let doc: DictionaryDoc = parse(text)?;
    if !(doc.beta >= 0.0 && doc.beta.is_finite()) {
        return Err(Error::schema("beta", "must be finite and nonnegative"));
    }
    check_len("atoms", doc.c, doc.atoms.len())?;
    let mut atoms = Vec::with_capacity(doc.c);
    for (i, a) in doc.atoms.into_iter().enumerate() {
        let prefix = format!("atoms[{i}].");
        if a.d != doc.d {
            return Err(Error::schema(format!("{prefix}d"), format!("expected {}, got {}", doc.d, a.d)));
        }
        if a.k != doc.k {
            return Err(Error::schema(format!("{prefix}K"), format!("expected {}, got {}", doc.k, a.k)));
        }
        match build_mixture(&prefix, a)?.0 {
            Mixture::Labeled(l) if l.n_classes() == doc.n_c => atoms.push(l),
            Mixture::Labeled(l) => {
                return Err(Error::schema(
                    format!("{prefix}labels"),
                    format!("expected {} classes, got {}", doc.n_c, l.n_classes()),
                ))
            }
            Mixture::Plain(_) => return Err(Error::schema(format!("{prefix}labels"), "atoms must carry labels")),
        }
    }
    for (i, row) in doc.lambda.iter().enumerate() {
        check_len(&format!("Lambda[{i}]"), doc.c, row.len())?;
    }
    check_len("sigma_floor", doc.d, doc.sigma_floor.len())?;
    if doc.sigma_floor.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::schema("sigma_floor", "entries must be positive"));
    }
    let dictionary = Dictionary::new(atoms, doc.lambda, doc.sigma_floor).map_err(at("Lambda"))?;
    Ok(DictionaryFile { dictionary, beta: doc.beta, meta: doc.meta })
}

pub fn write_dictionary(path: &Path, dict: &Dictionary, beta: f64, meta: &Meta) -> Result<()> {
    Ok(fs::write(path, dictionary_to_string(dict, beta, meta))?)
}

pub fn read_dictionary(path: &Path) -> Result<DictionaryFile> {
    dictionary_from_str(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dadil::init_dictionary;
    use crate::em::get_best_gmm;
    use crate::simplex::one_hot;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn gmm2() -> Gmm {
        Gmm::new(
            vec![0.1 + 0.2, 1.0 - (0.1 + 0.2)],
            vec![
                DiagGaussian::new(vec![1.0 / 3.0, -2.5e-17], vec![0.7, 1e300]).unwrap(),
                DiagGaussian::new(vec![std::f64::consts::PI, 4.0], vec![5e-324, 2.0]).unwrap(),
            ],
        )
        .unwrap()
    }

    fn schema_path(e: Error) -> String {
        match e {
            Error::Schema { path, .. } => path,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn mixture_round_trip_is_bit_exact() {
        let m = Mixture::Plain(gmm2());
        let meta = Meta { seed: Some(7), created: Some("2024-01-01T00:00:00Z".into()), iters: None };
        let text = mixture_to_string(&m, &meta);
        let (back, meta_back) = mixture_from_str(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta_back, meta);
        assert_eq!(mixture_to_string(&back, &meta_back), text);
    }

    #[test]
    fn labeled_round_trip() {
        let m = Mixture::Labeled(LabeledGmm::new(gmm2(), vec![one_hot(3, 2), vec![0.25, 0.5, 0.25]]).unwrap());
        let (back, _) = mixture_from_str(&mixture_to_string(&m, &Meta::default())).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let good = mixture_to_string(&Mixture::Plain(gmm2()), &Meta::default());
        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["components"][1]["sigma"][0] = serde_json::json!(-1.0);
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "components[1]");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["components"][0]["mu"][1] = serde_json::json!("x");
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "components[0].mu[1]");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["colour"] = serde_json::json!(1);
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "colour");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["weights"] = serde_json::json!([0.5, 0.6]);
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "weights");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["K"] = serde_json::json!(3);
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "weights");

        let mut v: serde_json::Value = serde_json::from_str(&good).unwrap();
        v["meta"]["author"] = serde_json::json!("x");
        assert_eq!(schema_path(mixture_from_str(&v.to_string()).unwrap_err()), "meta.author");
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let x = Array2::from_shape_fn((400, 2), |(i, j)| ((i * 37 + j * 11) % 101) as f64 / 10.0 + (i % 3) as f64 * 5.0);
        let batches: Vec<_> = x.axis_chunks_iter(ndarray::Axis(0), 40).collect();
        let cfg = StreamConfig::new(2, 4, 2, 5);

        let mut full = StreamState::init(batches[0], cfg).unwrap();
        for b in &batches[1..] {
            full.step(*b).unwrap();
        }

        let mut part = StreamState::init(batches[0], cfg).unwrap();
        for b in &batches[1..4] {
            part.step(*b).unwrap();
        }
        let (mut resumed, _) = checkpoint_from_str(&checkpoint_to_string(&part, &Meta::default())).unwrap();
        assert_eq!(resumed, part);
        for b in &batches[4..] {
            resumed.step(*b).unwrap();
        }
        assert_eq!(resumed, full);
    }

    #[test]
    fn checkpoint_rejects_bad_config() {
        let state = StreamState::init(Array2::from_shape_fn((20, 1), |(i, _)| i as f64).view(), StreamConfig::new(2, 3, 1, 0)).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&checkpoint_to_string(&state, &Meta::default())).unwrap();
        v["K_max"] = serde_json::json!(1);
        assert!(matches!(checkpoint_from_str(&v.to_string()), Err(Error::Schema { .. })));
    }

    #[test]
    fn dictionary_round_trip_and_errors() {
        let x = Array2::from_shape_fn((60, 2), |(i, j)| (i % 2) as f64 * 6.0 + ((i * 7 + j) % 5) as f64 / 5.0);
        let g = get_best_gmm(x.view(), 2, 2, 1).unwrap();
        let src = LabeledGmm::new(g.clone(), vec![one_hot(2, 0), one_hot(2, 1)]).unwrap();
        let dict = init_dictionary(&[src.clone(), src], &g, 2, 2, 3).unwrap();
        let meta = Meta { seed: Some(3), created: None, iters: Some(10) };
        let text = dictionary_to_string(&dict, 5.0, &meta);
        let back = dictionary_from_str(&text).unwrap();
        assert_eq!(back, DictionaryFile { dictionary: dict, beta: 5.0, meta });

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["atoms"][1].as_object_mut().unwrap().remove("labels");
        assert_eq!(schema_path(dictionary_from_str(&v.to_string()).unwrap_err()), "atoms[1].labels");

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["Lambda"][2] = serde_json::json!([0.5]);
        assert_eq!(schema_path(dictionary_from_str(&v.to_string()).unwrap_err()), "Lambda[2]");

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["atoms"][0]["components"][1]["sigma"][0] = serde_json::json!(0.0);
        assert_eq!(schema_path(dictionary_from_str(&v.to_string()).unwrap_err()), "atoms[0].components[1]");
    }

    proptest! {
        #[test]
        fn arbitrary_finite_mixtures_round_trip(
            mu in prop::collection::vec(-1e6f64..1e6, 6),
            sigma in prop::collection::vec(1e-9f64..1e6, 6),
            w in 0.001f64..0.999,
        ) {
            let g = Gmm::new(
                vec![w, 1.0 - w],
                vec![
                    DiagGaussian::new(mu[..3].to_vec(), sigma[..3].to_vec()).unwrap(),
                    DiagGaussian::new(mu[3..].to_vec(), sigma[3..].to_vec()).unwrap(),
                ],
            ).unwrap();
            let m = Mixture::Plain(g);
            let (back, _) = mixture_from_str(&mixture_to_string(&m, &Meta::default())).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
