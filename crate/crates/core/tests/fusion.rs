use unipatch::fusion::{
    self, ByteTokenizer, CopyTaskConfig, DecoderConfig, DecoderParams, Segment, VisualSpan, BOS, EOS, IMAGE, VOCAB_SIZE,
};
use unipatch::numkit::Matrix;
use unipatch::tokred::Provenance;
use unipatch::Error;

fn span(rows: usize, d: usize) -> VisualSpan {
    VisualSpan {
        embeddings: Matrix::from_vec(rows, d, (0..rows * d).map(|i| i as f64 * 0.01).collect()).unwrap(),
        provenance: (0..rows).map(|i| Provenance { plane: 0, m: 0, n: i }).collect(),
    }
}

#[test]
fn tokenizer_round_trips_bytes_and_skips_specials() {
    let tok = ByteTokenizer;
    assert_eq!(tok.vocab_size(), VOCAB_SIZE);
    let text = "copy: ÿ\u{0}é";
    let mut ids = vec![BOS];
    ids.extend(tok.encode(text.as_bytes()));
    ids.push(EOS);
    assert_eq!(tok.decode(&ids).unwrap(), text.as_bytes());
    assert!(tok.decode(&[VOCAB_SIZE as u32]).is_err());

    let prompt = tok.encode_prompt("a<img>b");
    assert_eq!(prompt, [u32::from(b'a'), IMAGE, u32::from(b'b')]);
}

#[test]
fn visual_span_lands_at_the_placeholder() {
    let config = DecoderConfig::default();
    let params = DecoderParams::init(&config, 0).unwrap();
    let ids = ByteTokenizer.encode_prompt("ab<img>c");
    let seq = fusion::assemble(&ids, &span(3, config.d_model), &params).unwrap();
    assert_eq!(seq.len(), 6);
    assert_eq!(seq.visual_start(), Some(2));
    assert!(matches!(seq.segments[5], Segment::Text { offset: 3, token } if token == u32::from(b'c')));
    assert_eq!(seq.embeddings.row(2), span(3, config.d_model).embeddings.row(0));
    assert_eq!(seq.embeddings.row(0), params.token_embedding.row(usize::from(b'a')));

    let targets = fusion::next_token_targets(&seq.segments);
    assert_eq!(targets.len(), seq.len());
}

#[test]
fn placeholder_count_is_enforced() {
    let config = DecoderConfig::default();
    let params = DecoderParams::init(&config, 0).unwrap();
    let v = span(2, config.d_model);
    for (prompt, count) in [("none", 0), ("<img><img>", 2)] {
        let err = fusion::assemble(&ByteTokenizer.encode_prompt(prompt), &v, &params).unwrap_err();
        assert!(matches!(err, Error::Placeholder { count: c } if c == count), "{prompt}: {err}");
    }
    let text_only = fusion::assemble(&ByteTokenizer.encode_prompt("hi"), &VisualSpan::empty(config.d_model), &params);
    assert_eq!(text_only.unwrap().len(), 2);
    assert!(fusion::assemble(&ByteTokenizer.encode_prompt("<img>"), &span(2, config.d_model + 1), &params).is_err());
}

#[test]
fn logits_cover_the_vocabulary() {
    let config = DecoderConfig::default();
    let params = DecoderParams::init(&config, 4).unwrap();
    let seq = fusion::assemble(&ByteTokenizer.encode_prompt("x<img>y"), &span(4, config.d_model), &params).unwrap();
    let logits = fusion::decoder_forward(&seq, &params, &config).unwrap();
    assert_eq!(logits.shape(), (6, VOCAB_SIZE));
    assert!(logits.is_finite());
}

#[test]
fn copy_task_is_seeded() {
    let config = CopyTaskConfig { steps: 5, ..CopyTaskConfig::default() };
    let a = fusion::train_copy_task(&config, 1).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a, fusion::train_copy_task(&config, 1).unwrap());
    assert_ne!(a, fusion::train_copy_task(&config, 2).unwrap());
}
