mod common;

use std::collections::HashMap;

use demo_forge::dsl::{
    brute_force_oracle, eval_program, parse_program, print_program, EvalErrorKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn evaluator_matches_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut outcomes: HashMap<String, usize> = HashMap::new();
    for i in 0..3000 {
        let table = common::random_table(&mut rng);
        let program = common::random_program(&mut rng, &table);
        // go through text so the parser is exercised too
        let text = print_program(&program);
        let parsed = parse_program(&text).unwrap_or_else(|e| panic!("#{i} {text}: {e}"));
        let fast = eval_program(&parsed, &table)
            .map(|a| a.raw().to_string())
            .map_err(|e| e.kind);
        let slow = brute_force_oracle(&parsed, &table);
        assert_eq!(fast, slow, "#{i} program {text} table {table:?}");
        let key = match &fast {
            Ok(_) => "ok".to_string(),
            Err(k) => k.to_string(),
        };
        *outcomes.entry(key).or_default() += 1;
    }
    // the generator must reach successful evaluations and every error kind
    assert!(outcomes["ok"] > 600, "{outcomes:?}");
    for kind in [
        EvalErrorKind::MissingColumn,
        EvalErrorKind::TypeMismatch,
        EvalErrorKind::DivisionByZero,
        EvalErrorKind::EmptyAggregate,
        EvalErrorKind::UnboundName,
    ] {
        assert!(outcomes.contains_key(&kind.to_string()), "{kind} never produced: {outcomes:?}");
    }
}

#[test]
fn print_parse_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..500 {
        let table = common::random_table(&mut rng);
        let program = common::random_program(&mut rng, &table);
        let once = print_program(&parse_program(&print_program(&program)).unwrap());
        let parsed = parse_program(&once).unwrap();
        let twice = print_program(&parsed);
        assert_eq!(once, twice);
        assert_eq!(parsed.without_spans(), program.without_spans());
    }
}

const ALPHABET: &[&str] = &[
    "w", "[", "]", "(", ")", "'", "\"", "a", "x1", "=", "==", "!=", "<", ">=", "-", "->", "+", "*",
    "/", ",", ";", " ", "\n", "1", "2.5", "sum", "filter", "argmin", "concat", "and", "or",
    "contains", "\\", "é", "!", "#", ".",
];

#[test]
fn parser_is_total_on_malformed_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut errors = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(0..24);
        let src: String = (0..n)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
            .collect();
        match parse_program(&src) {
            Ok(p) => {
                // whatever parses must survive a round trip
                let again = parse_program(&print_program(&p)).unwrap();
                assert_eq!(again.without_spans(), p.without_spans(), "{src:?}");
            }
            Err(e) => {
                errors += 1;
                assert!(e.line >= 1 && e.column >= 1);
                let lines: Vec<&str> = src.split('\n').collect();
                assert!(e.line <= lines.len(), "{src:?} -> {e}");
                assert!(e.column <= lines[e.line - 1].chars().count() + 1, "{src:?} -> {e}");
            }
        }
    }
    assert!(errors > 9000);
}

#[test]
fn random_mutations_of_valid_programs_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    for _ in 0..2000 {
        let table = common::random_table(&mut rng);
        let text = print_program(&common::random_program(&mut rng, &table));
        let mut chars: Vec<char> = text.chars().collect();
        for _ in 0..rng.random_range(1..4) {
            if chars.is_empty() {
                break;
            }
            let i = rng.random_range(0..chars.len());
            match rng.random_range(0..3) {
                0 => {
                    chars.remove(i);
                }
                1 => chars.insert(i, ['(', ')', '\'', ',', ';', '-'][rng.random_range(0..6)]),
                _ => chars.truncate(i),
            }
        }
        let mutated: String = chars.into_iter().collect();
        if let Ok(p) = parse_program(&mutated) {
            let _ = eval_program(&p, &table);
        }
    }
}

#[test]
fn repeated_evaluation_is_byte_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let table = common::random_table(&mut rng);
        let program = common::random_program(&mut rng, &table);
        let first = format!("{:?}", eval_program(&program, &table).map(|a| a.raw().to_string()));
        for _ in 0..100 {
            let again = format!("{:?}", eval_program(&program, &table).map(|a| a.raw().to_string()));
            assert_eq!(again, first);
        }
    }
}
