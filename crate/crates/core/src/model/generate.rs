use super::{sample_next, Model, SamplingParams};
use crate::error::{Error, Result};
use crate::tap::PatchPlan;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt_ids: Vec<TokenId>,
    /// Sampled ids, excluding any stop token.
    pub generated_ids: Vec<TokenId>,
}

impl Model {
    /// Autoregressive sampling. `patches` apply while the prompt is processed
    /// and never again; afterwards the patched positions act only through
    /// their cached keys and values. Generation also ends when the context
    /// window is full.
    pub fn generate(
        &self,
        prompt: &[TokenId],
        params: &SamplingParams,
        patches: Option<&PatchPlan>,
    ) -> Result<Generation> {
        params.validate()?;
        if prompt.is_empty() {
            return Err(Error::EmptyInput("generation prompt"));
        }
        if prompt.len() > self.config.max_positions {
            return Err(Error::Range(format!(
                "prompt of {} tokens exceeds max_positions {}",
                prompt.len(),
                self.config.max_positions
            )));
        }
        let mut generated = Vec::new();
        if params.max_new_tokens == 0 {
            return Ok(Generation {
                prompt_ids: prompt.to_vec(),
                generated_ids: generated,
            });
        }

        let mut cache = self.new_cache();
        let pass = self.run(prompt, &mut cache, None, patches)?;
        let mut logits = self.project_logits(&pass.hidden, prompt.len() - 1..prompt.len());
        for step in 0..params.max_new_tokens as u64 {
            let next = sample_next(&logits, params, step);
            if params.stop_tokens.contains(&next) {
                break;
            }
            generated.push(next);
            if generated.len() == params.max_new_tokens || cache.len() == cache.capacity() {
                break;
            }
            let pass = self.run(&[next], &mut cache, None, None)?;
            logits = self.project_logits(&pass.hidden, 0..1);
        }
        Ok(Generation {
            prompt_ids: prompt.to_vec(),
            generated_ids: generated,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;
    use crate::tap::{build_patch_plan, capture, TapSpec};

    fn model() -> Model {
        Model::seeded(ModelConfig::tiny(257), 9).unwrap()
    }

    #[test]
    fn zero_new_tokens() {
        let g = model()
            .generate(&[1, 2, 3], &SamplingParams::greedy(0), None)
            .unwrap();
        assert!(g.generated_ids.is_empty());
    }

    #[test]
    fn same_seed_same_output() {
        let m = model();
        let p = SamplingParams {
            temperature: 0.8,
            seed: 77,
            max_new_tokens: 24,
            ..SamplingParams::default()
        };
        let a = m.generate(&[256, 10, 10], &p, None).unwrap();
        let b = m.generate(&[256, 10, 10], &p, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.generated_ids.len(), 24);
        let c = m.generate(&[256, 10, 10], &p.with_seed(78), None).unwrap();
        assert_ne!(a.generated_ids, c.generated_ids);
    }

    #[test]
    fn greedy_matches_manual_argmax_loop() {
        let m = model();
        let prompt = vec![256, 72, 105, 10, 10];
        let g = m
            .generate(&prompt, &SamplingParams::greedy(10), None)
            .unwrap();
        let mut seq = prompt.clone();
        for _ in 0..10 {
            let out = m.forward(&seq, &mut m.new_cache(), None, None).unwrap();
            let row = out.logits.row(seq.len() - 1);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            seq.push(best as TokenId);
        }
        assert_eq!(g.generated_ids, seq[prompt.len()..]);
    }

    #[test]
    fn stop_token_ends_generation() {
        let m = model();
        let first = m
            .generate(&[256, 65], &SamplingParams::greedy(1), None)
            .unwrap()
            .generated_ids[0];
        let p = SamplingParams {
            stop_tokens: vec![first],
            ..SamplingParams::greedy(5)
        };
        assert!(m
            .generate(&[256, 65], &p, None)
            .unwrap()
            .generated_ids
            .is_empty());
    }

    #[test]
    fn prompt_too_long() {
        let m = model();
        let prompt = vec![1; 257];
        assert!(matches!(
            m.generate(&prompt, &SamplingParams::greedy(1), None),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn patched_prompt_only_touches_prompt() {
        let m = model();
        let donor: Vec<TokenId> = b"topic one\n\ntopic two"
            .iter()
            .map(|&b| b as TokenId)
            .collect();
        let snap = capture(&m, &donor, &TapSpec::block_out_at(10)).unwrap();
        let plan = build_patch_plan(&snap, 2).unwrap();
        let bad = build_patch_plan(&snap, 3).unwrap();
        assert!(m
            .generate(&[256, 10, 10], &SamplingParams::greedy(4), Some(&plan))
            .is_ok());
        assert!(matches!(
            m.generate(&[256, 10, 10], &SamplingParams::greedy(4), Some(&bad)),
            Err(Error::Patch(_))
        ));
    }
}
