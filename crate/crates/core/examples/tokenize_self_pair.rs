//! WordPiece tokenization and the three input layouts: single sentence,
//! query/document pair, and a sentence paired with itself.

use ceinfuse::data::build_vocab;
use ceinfuse::tokenizer::{encode_pair, encode_single, wordpiece_tokenize};

fn main() -> ceinfuse::Result<()> {
    let corpus = [
        "the cat sat on the mat",
        "cats and dogs are pets",
        "a dog chased the cat",
        "mats are woven from reeds",
    ];
    let vocab = build_vocab(&corpus, 40)?;
    println!("vocabulary of {} tokens", vocab.len());

    let text = "the cats chased dogs";
    println!("wordpieces: {:?}", wordpiece_tokenize(text, &vocab));

    let show = |label: &str, enc: &ceinfuse::tokenizer::Encoding| {
        let toks: Vec<String> = enc
            .ids
            .iter()
            .zip(&enc.segment_ids)
            .take(enc.real_len())
            .map(|(&id, &seg)| format!("{}/{seg}", vocab.token(id).unwrap_or("?")))
            .collect();
        println!("{label:>10}: {}", toks.join(" "));
    };
    show("single", &encode_single(text, &vocab, 16)?);
    show("pair", &encode_pair("cat on mat", text, &vocab, 16, false)?);
    show("self-pair", &encode_pair(text, "", &vocab, 16, true)?);
    // A tight budget trims the longer side first.
    show("truncated", &encode_pair(text, text, &vocab, 9, false)?);
    Ok(())
}
