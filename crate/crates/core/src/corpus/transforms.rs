use super::dataset::McqaExample;

/// Every candidate text becomes the correct answer; subgraphs are kept.
pub fn apply_operation_a(examples: &[McqaExample]) -> Vec<McqaExample> {
    examples
        .iter()
        .map(|ex| {
            let mut out = ex.clone();
            let right = ex.candidates[ex.correct].clone();
            out.candidates.iter_mut().for_each(|c| *c = right.clone());
            out
        })
        .collect()
}

/// Every candidate subgraph becomes the correct answer's; texts are kept.
pub fn apply_operation_b(examples: &[McqaExample]) -> Vec<McqaExample> {
    examples
        .iter()
        .map(|ex| {
            let mut out = ex.clone();
            let right = ex.subgraphs[ex.correct].clone();
            out.subgraphs.iter_mut().for_each(|g| *g = right.clone());
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::dataset::{example_to_json, subgraph_json};
    use crate::corpus::synth::{generate_synthetic_dataset, GenConfig};

    fn data() -> Vec<McqaExample> {
        let cfg = GenConfig {
            n_entities: 24,
            n_relations: 3,
            n_examples: 20,
            n_candidates: 3,
            ..GenConfig::default()
        };
        generate_synthetic_dataset(&cfg).unwrap().train
    }

    fn texts(ex: &McqaExample) -> Vec<Vec<String>> {
        (0..ex.num_candidates())
            .map(|i| ex.merged_tokens(i))
            .collect()
    }

    fn graphs(ex: &McqaExample) -> Vec<String> {
        ex.subgraphs.iter().map(subgraph_json).collect()
    }

    #[test]
    fn operation_a_equalizes_texts_and_keeps_graphs() {
        let before = data();
        let after = apply_operation_a(&before);
        for (b, a) in before.iter().zip(&after) {
            let t = texts(a);
            assert!(t.iter().all(|x| x == &t[0]));
            assert_eq!(graphs(b), graphs(a));
            assert_eq!(a.correct, b.correct);
        }
        // three candidates with three distinct graphs stay distinct
        let distinct = after.iter().find(|a| {
            let g = graphs(a);
            g[0] != g[1] && g[1] != g[2] && g[0] != g[2]
        });
        assert!(distinct.is_some());
    }

    #[test]
    fn operation_b_equalizes_graphs_and_keeps_texts() {
        let before = data();
        let after = apply_operation_b(&before);
        for (b, a) in before.iter().zip(&after) {
            let g = graphs(a);
            assert!(g.iter().all(|x| x == &g[0]));
            assert_eq!(texts(b), texts(a));
        }
    }

    #[test]
    fn idempotent_and_composable() {
        let d = data();
        let dump = |v: &[McqaExample]| v.iter().map(example_to_json).collect::<Vec<_>>();
        let a = apply_operation_a(&d);
        assert_eq!(dump(&apply_operation_a(&a)), dump(&a));
        let b = apply_operation_b(&d);
        assert_eq!(dump(&apply_operation_b(&b)), dump(&b));
        for ex in apply_operation_a(&b) {
            let (t, g) = (texts(&ex), graphs(&ex));
            assert!(t.iter().all(|x| x == &t[0]) && g.iter().all(|x| x == &g[0]));
        }
    }
}
