use contextlm::data::{decode, encode, load_corpus, BatchSampler, Corpus, Split};
use std::io::Write;

fn corpus(n: usize) -> Corpus {
    let bytes: Vec<u8> = (0..n).map(|i| (i * 31 % 251) as u8).collect();
    Corpus::from_bytes(bytes, 0.1).unwrap()
}

#[test]
fn load_corpus_from_file() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(&[5u8; 1000]).unwrap();
    let c = load_corpus(f.path(), 0.1).unwrap();
    assert_eq!(c.range(Split::Train), 0..900);
    assert_eq!(c.range(Split::Val), 900..1000);
    let empty = tempfile::NamedTempFile::new().unwrap();
    let err = load_corpus(empty.path(), 0.1).unwrap_err().to_string();
    assert!(err.contains("empty"), "{err}");
    assert!(load_corpus(std::path::Path::new("/nonexistent/corpus.txt"), 0.1).is_err());
}

#[test]
fn text_round_trip() {
    let text = "héllo, wörld\n".as_bytes();
    assert_eq!(decode(&encode(text)).unwrap(), text);
}

#[test]
fn batches_shift_and_stay_inside_split() {
    let c = corpus(5000);
    for split in [Split::Train, Split::Val] {
        let range = c.range(split);
        let mut s = BatchSampler::new(&c, split, 32, 4, 3).unwrap();
        for _ in 0..200 {
            let starts = s.next_starts();
            for &st in &starts {
                assert!(st >= range.start && st + 33 <= range.end);
            }
        }
        let (inputs, targets) = s.next_batch(&c);
        for b in 0..4 {
            let row = inputs.row(b);
            assert_eq!(&row[1..], &targets[b * 32..b * 32 + 31]);
        }
    }
}

#[test]
fn seeded_batches_repeat_and_resume() {
    let c = corpus(5000);
    let mut a = BatchSampler::new(&c, Split::Train, 16, 3, 42).unwrap();
    let mut b = BatchSampler::new(&c, Split::Train, 16, 3, 42).unwrap();
    for _ in 0..10 {
        assert_eq!(a.next_batch(&c), b.next_batch(&c));
    }
    let state = a.state();
    let expected: Vec<_> = (0..5).map(|_| a.next_batch(&c)).collect();
    let mut resumed = BatchSampler::new(&c, Split::Train, 16, 3, 42).unwrap();
    resumed.restore(state);
    let json = serde_json::to_string(&state).unwrap();
    assert_eq!(serde_json::from_str::<contextlm::data::SamplerState>(&json).unwrap(), state);
    for e in expected {
        assert_eq!(resumed.next_batch(&c), e);
    }
    let mut other = BatchSampler::new(&c, Split::Train, 16, 3, 43).unwrap();
    assert_ne!(other.next_starts(), BatchSampler::new(&c, Split::Train, 16, 3, 42).unwrap().next_starts());
}

#[test]
fn short_split_is_rejected() {
    let c = Corpus::from_bytes(vec![1; 100], 0.1).unwrap();
    assert!(BatchSampler::new(&c, Split::Val, 9, 1, 0).is_err());
    assert!(BatchSampler::new(&c, Split::Val, 8, 1, 0).is_ok());
}

#[test]
fn window_starts_cover_split_uniformly() {
    // χ² over 10 equal-width bins of the valid start range.
    let c = corpus(20_000);
    let range = c.range(Split::Train);
    let mut s = BatchSampler::new(&c, Split::Train, 64, 1, 7).unwrap();
    let lo = range.start;
    let span = range.end - 65 - lo + 1;
    let bins = 10;
    let mut counts = vec![0usize; bins];
    let draws = 10_000;
    for _ in 0..draws {
        let st = s.next_starts()[0];
        counts[(st - lo) * bins / span] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    // 9 degrees of freedom; 27.88 is the 0.999 quantile.
    assert!(chi2 < 27.88, "chi2 = {chi2}, counts {counts:?}");
    let min = (0..draws).map(|_| s.next_starts()[0]).min().unwrap();
    assert!(min < lo + span / 100);
}
