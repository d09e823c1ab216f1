//! Entity-type referents.
//!
//! A referent is the vector an entity span is scored against. The default
//! variant embeds a generated natural-language definition of the type; the
//! other variants (random vectors, bare type names, definitions plus example
//! mentions) exist for ablations.

mod cache;
mod client;

pub use cache::{CacheRecord, DefinitionCache, ExampleFixture};
pub use client::{
    definition_prompt, fetch_definition, ClientConfig, CompletionTransport, LlmClient, TransportError,
};
#[cfg(feature = "live")]
pub use client::HttpTransport;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize_words;
use crate::neural::{hash_token, EncoderView};

#[derive(Debug, Error)]
pub enum ReferentError {
    #[error("no cached definition for type {0:?} and live access is disabled")]
    CacheMiss(String),
    #[error("definition for type {0:?} is empty")]
    EmptyDefinition(String),
    #[error("no example mentions for type {0:?}")]
    MissingExamples(String),
    #[error("unknown referent variant {0:?} (expected mcs, random, name or example)")]
    UnknownVariant(String),
    #[error("requesting a definition for {type_name:?} failed after {attempts} attempts: {last}")]
    Transport { type_name: String, attempts: u32, last: String },
    #[error("cache file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DefinitionSource {
    Llm,
    Fixture,
    Name,
    Example,
    Random,
}

/// Sampling settings recorded with every generated definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_length: u32,
    pub model: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { temperature: 0.7, max_length: 80, model: "text-davinci-003".to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDefinition {
    pub type_name: String,
    pub definition_text: String,
    pub source: DefinitionSource,
    pub config: Option<GenerationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Definition(TypeDefinition),
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeReferent {
    pub type_name: String,
    pub vector: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferentVariant {
    Mcs,
    Random,
    Name,
    Example,
}

impl ReferentVariant {
    pub const ALL: [ReferentVariant; 4] =
        [ReferentVariant::Mcs, ReferentVariant::Random, ReferentVariant::Name, ReferentVariant::Example];

    pub fn as_str(self) -> &'static str {
        match self {
            ReferentVariant::Mcs => "mcs",
            ReferentVariant::Random => "random",
            ReferentVariant::Name => "name",
            ReferentVariant::Example => "example",
        }
    }
}

impl fmt::Display for ReferentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferentVariant {
    type Err = ReferentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcs" => Ok(ReferentVariant::Mcs),
            "random" => Ok(ReferentVariant::Random),
            "name" => Ok(ReferentVariant::Name),
            "example" => Ok(ReferentVariant::Example),
            other => Err(ReferentError::UnknownVariant(other.to_string())),
        }
    }
}

/// What a referent is computed from: text to run through the sentence
/// encoder, or a fixed vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferentSource {
    Text { tokens: Vec<String>, definition: TypeDefinition },
    Fixed { vector: Vec<f64>, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferentInput {
    pub type_name: String,
    pub source: ReferentSource,
}

impl ReferentInput {
    pub fn from_definition(definition: TypeDefinition) -> Result<Self, ReferentError> {
        let tokens = tokenize_words(&definition.definition_text);
        if tokens.is_empty() {
            return Err(ReferentError::EmptyDefinition(definition.type_name));
        }
        Ok(Self { type_name: definition.type_name.clone(), source: ReferentSource::Text { tokens, definition } })
    }
}

/// Everything needed to turn type names into referent inputs.
#[derive(Clone, Copy)]
pub struct ReferentResources<'a> {
    pub cache: &'a DefinitionCache,
    pub client: &'a LlmClient,
    pub examples: &'a ExampleFixture,
}

/// Mean of the encoder's token representations of the definition text.
pub fn embed_referent(encoder: &EncoderView<'_>, definition: &TypeDefinition) -> Result<TypeReferent, ReferentError> {
    let tokens = tokenize_words(&definition.definition_text);
    if tokens.is_empty() {
        return Err(ReferentError::EmptyDefinition(definition.type_name.clone()));
    }
    Ok(TypeReferent {
        type_name: definition.type_name.clone(),
        vector: mean_rows(encoder, &tokens),
        provenance: Provenance::Definition(definition.clone()),
    })
}

pub(crate) fn mean_rows(encoder: &EncoderView<'_>, tokens: &[String]) -> Vec<f64> {
    let h = encoder.forward(tokens).outputs;
    let mut v = vec![0.0; h.cols];
    for i in 0..h.rows {
        for (a, b) in v.iter_mut().zip(h.row(i)) {
            *a += b;
        }
    }
    let n = h.rows as f64;
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Standard-normal vector for `type_name`, a pure function of `(seed, type_name, dim)`.
pub fn random_referent_vector(type_name: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mix = hash_token(type_name, usize::MAX) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ mix.rotate_left(17));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Referent inputs for `types`, in request order.
pub fn referent_inputs(
    variant: ReferentVariant,
    types: &[String],
    resources: ReferentResources<'_>,
    seed: u64,
    dim: usize,
) -> Result<Vec<ReferentInput>, ReferentError> {
    types
        .iter()
        .map(|t| match variant {
            ReferentVariant::Mcs => ReferentInput::from_definition(fetch_definition(t, resources.cache, resources.client)?),
            ReferentVariant::Name => ReferentInput::from_definition(TypeDefinition {
                type_name: t.clone(),
                definition_text: t.clone(),
                source: DefinitionSource::Name,
                config: None,
            }),
            ReferentVariant::Example => {
                let def = fetch_definition(t, resources.cache, resources.client)?;
                let examples = resources.examples.get(t).ok_or_else(|| ReferentError::MissingExamples(t.clone()))?;
                ReferentInput::from_definition(TypeDefinition {
                    type_name: t.clone(),
                    definition_text: format!("{} Examples: {}.", def.definition_text, examples.join(", ")),
                    source: DefinitionSource::Example,
                    config: def.config,
                })
            }
            ReferentVariant::Random => Ok(ReferentInput {
                type_name: t.clone(),
                source: ReferentSource::Fixed { vector: random_referent_vector(t, seed, dim), seed },
            }),
        })
        .collect()
}

/// Materialize referents against a sentence encoder.
pub fn embed_inputs(encoder: &EncoderView<'_>, inputs: &[ReferentInput]) -> Vec<TypeReferent> {
    inputs
        .iter()
        .map(|inp| match &inp.source {
            ReferentSource::Text { tokens, definition } => TypeReferent {
                type_name: inp.type_name.clone(),
                vector: mean_rows(encoder, tokens),
                provenance: Provenance::Definition(definition.clone()),
            },
            ReferentSource::Fixed { vector, seed } => TypeReferent {
                type_name: inp.type_name.clone(),
                vector: vector.clone(),
                provenance: Provenance::Random { seed: *seed },
            },
        })
        .collect()
}

/// One referent per requested type, in request order.
pub fn build_referents(
    variant: ReferentVariant,
    types: &[String],
    encoder: &EncoderView<'_>,
    resources: ReferentResources<'_>,
    seed: u64,
) -> Result<Vec<TypeReferent>, ReferentError> {
    let inputs = referent_inputs(variant, types, resources, seed, encoder.config.dim)?;
    Ok(embed_inputs(encoder, &inputs))
}
