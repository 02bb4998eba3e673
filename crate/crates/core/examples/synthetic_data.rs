//! Generates a few samples and prints one in token form.

use tcas_lab::synth::{generate_sample, write_jsonl, SynthSpec, Variant};

fn main() -> tcas_lab::Result<()> {
    let spec = SynthSpec::default();
    let vocab = spec.vocab();
    let s = generate_sample(&spec, 0)?;
    println!("video classes  {:?}", s.video);
    println!("events         {:?}", s.events);
    println!("query          {:?} -> bins {}..={}", s.original.tokens, s.original.start_bin, s.original.end_bin);
    println!("rephrased      {:?}", s.rephrased.tokens);
    println!("shifted video  {:?} -> bins {}..={}", s.shifted.video, s.shifted.start_bin, s.shifted.end_bin);
    for q in s.eoj.iter().flatten().take(2) {
        println!("order question {:?} {:?} -> {}", q.relation, q.tokens, q.answer);
    }
    let p = s.grounding_prompt(&vocab, Variant::Original, &[])?;
    println!("prompt tokens  {:?} (vocab size {})", p.tokens, vocab.size());

    let samples: Vec<_> = (0..3).map(|i| generate_sample(&spec, i)).collect::<Result<_, _>>()?;
    let mut buf = Vec::new();
    write_jsonl(&samples, &mut buf)?;
    print!("{}", String::from_utf8_lossy(&buf));
    Ok(())
}
