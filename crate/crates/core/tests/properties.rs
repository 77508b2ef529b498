mod common;

use proptest::prelude::*;

use crnn_gan::features::{curriculum_length, sample_batch, song_to_events, CurriculumSchedule, NormalizedSequence, ToneEvent};
use crnn_gan::metrics::{self, MetricsReport};
use crnn_gan::midi::{events_to_midi, freq_to_midi_note, midi_note_to_freq, parse_midi};
use crnn_gan::models::{discriminator_forward, generator_forward, DiscriminatorParams, GeneratorParams, ModelConfig, NoiseSequence};
use crnn_gan::nn::{sgd_step, Parameterized, RngState};
use crnn_gan::training::{feature_matching_loss, freeze_gate, loss_d, loss_g};

fn small(tones_per_step: usize) -> ModelConfig {
    ModelConfig { depth: 2, hidden: 6, tones_per_step, noise_dim: 4 }
}

fn tone() -> impl Strategy<Value = ToneEvent> {
    (0.0..800.0f64, 21u8..=108, -0.4..0.4f64, 1.0..=127.0f64, prop_oneof![Just(0.0), 0.0..500.0f64]).prop_map(
        |(duration, note, detune, intensity, delta)| ToneEvent {
            duration_ticks: duration,
            freq_hz: 440.0 * 2f64.powf((f64::from(note) + detune - 69.0) / 12.0),
            intensity,
            delta_ticks: delta,
        },
    )
}

proptest! {
    #[test]
    fn note_frequency_round_trip(note in 0u8..=127) {
        prop_assert_eq!(freq_to_midi_note(midi_note_to_freq(note)).unwrap(), note);
    }

    #[test]
    fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..300)) {
        let _ = parse_midi(&bytes);
    }

    #[test]
    fn parsed_songs_reserialize_identically(events in prop::collection::vec(tone(), 1..40)) {
        // a second note-on of a sounding pitch shortens the first, so compare
        // the file against its own re-serialization
        let song = parse_midi(&events_to_midi(&events).unwrap()).unwrap();
        let again = parse_midi(&events_to_midi(&song_to_events(&song)).unwrap()).unwrap();
        prop_assert_eq!(song.notes, again.notes);
    }

    #[test]
    fn curriculum_is_monotone_and_capped(base in 1usize..20, period in 1usize..5, extra in 0usize..100, epoch in 0usize..50) {
        let s = CurriculumSchedule { base_length: base, doubling_period_epochs: period, max_length: base + extra };
        let (a, b) = (curriculum_length(&s, epoch), curriculum_length(&s, epoch + 1));
        prop_assert!(a <= b);
        prop_assert!(b <= s.max_length);
        prop_assert!(a >= base);
    }

    #[test]
    fn batches_are_reproducible(seed in any::<u64>(), len in 1usize..12) {
        let corpus = common::scale_walks(3, 16, 1);
        let draw = || sample_batch(&corpus, 1, len, 4, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(draw(), draw());
    }

    #[test]
    fn flatten_and_load_are_inverse(seed in any::<u64>(), t in prop_oneof![Just(1usize), Just(3)]) {
        let g = GeneratorParams::init(small(t), &mut RngState::new(seed));
        let mut other = GeneratorParams::init(small(t), &mut RngState::new(seed ^ 1));
        other.load_flat(&g.flatten()).unwrap();
        prop_assert_eq!(other.flatten().values, g.flatten().values);
    }

    #[test]
    fn sgd_without_gradient_or_decay_is_identity(seed in any::<u64>(), lr in 0.0..1.0f64) {
        let theta = DiscriminatorParams::init(small(1), &mut RngState::new(seed)).flatten();
        let next = sgd_step(&theta, &theta.zeros_like(), lr, 0.0).unwrap();
        prop_assert_eq!(next.values, theta.values);
    }

    #[test]
    fn model_outputs_are_probabilities(seed in any::<u64>(), len in 1usize..10, t in prop_oneof![Just(1usize), Just(3)]) {
        let mut rng = RngState::new(seed);
        let g = GeneratorParams::init(small(t), &mut rng);
        let d = DiscriminatorParams::init(small(t), &mut rng);
        let x = generator_forward(&g, &NoiseSequence::sample(len, 4, &mut rng)).unwrap();
        prop_assert!(x.data.iter().all(|&v| v > 0.0 && v < 1.0));
        let out = discriminator_forward(&d, &x).unwrap();
        prop_assert!(out.per_step.iter().all(|&p| p > 0.0 && p < 1.0));
        let mean = out.per_step.iter().sum::<f64>() / out.per_step.len() as f64;
        prop_assert!((out.p_mean - mean).abs() <= 1e-12);
    }

    #[test]
    fn forward_passes_are_deterministic(seed in any::<u64>(), len in 1usize..8) {
        let run = || {
            let mut rng = RngState::new(seed);
            let g = GeneratorParams::init(small(1), &mut rng);
            let d = DiscriminatorParams::init(small(1), &mut rng);
            let x = generator_forward(&g, &NoiseSequence::sample(len, 4, &mut rng)).unwrap();
            let p = discriminator_forward(&d, &x).unwrap();
            (x.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), p.p_mean.to_bits())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn losses_have_fixed_signs(
        real in prop::collection::vec(1e-9..1.0f64, 1..10),
        fake in prop::collection::vec(0.0..1.0f64 - 1e-9, 1..10),
    ) {
        let n = real.len().min(fake.len());
        prop_assert!(loss_d(&real[..n], &fake[..n]).unwrap() >= 0.0);
        prop_assert!(loss_g(&fake).unwrap() <= 0.0);
    }

    #[test]
    fn feature_matching_is_a_squared_distance(
        a in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 3), 1..5),
        shift in prop::collection::vec(-1.0..1.0f64, 3),
    ) {
        prop_assert_eq!(feature_matching_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|r| r.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let l = feature_matching_loss(&a, &b).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, shift.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn freeze_gate_keeps_someone_training(d in 0.0..10.0f64, g in 0.0..10.0f64, ratio in 0.01..0.99f64) {
        prop_assert_ne!(freeze_gate(d, g, ratio), (false, false));
    }

    #[test]
    fn metric_ranges(seq in prop::collection::vec(tone(), 0..30)) {
        let r = MetricsReport::evaluate(&seq);
        prop_assert!((0.0..=1.0).contains(&r.polyphony));
        prop_assert!((0.0..=1.0).contains(&r.scale_consistency));
        prop_assert!(r.repetitions_3 >= 0.0 && r.repetitions_3.fract() == 0.0);
        prop_assert!(r.intensity_span >= 0.0);
        if seq.is_empty() {
            prop_assert_eq!(r.scale_consistency, 1.0);
            prop_assert_eq!((r.polyphony, r.repetitions_3, r.tone_span, r.unique_tones, r.intensity_span), (0.0, 0.0, 0, 0, 0.0));
        }
    }

    #[test]
    fn scale_consistency_ignores_transposition(seq in prop::collection::vec(tone(), 1..30), shift in -12i32..=12) {
        let moved: Vec<ToneEvent> =
            seq.iter().map(|e| ToneEvent { freq_hz: e.freq_hz * 2f64.powf(f64::from(shift) / 12.0), ..*e }).collect();
        prop_assert_eq!(metrics::scale_consistency(&seq), metrics::scale_consistency(&moved));
    }

    #[test]
    fn repetitions_depend_on_pitch_order_only(seq in prop::collection::vec(tone(), 0..30), seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let varied: Vec<ToneEvent> = seq
            .iter()
            .map(|e| ToneEvent {
                duration_ticks: rng.uniform(0.0, 900.0),
                intensity: rng.uniform(0.0, 127.0),
                delta_ticks: rng.uniform(0.0, 900.0),
                ..*e
            })
            .collect();
        prop_assert_eq!(metrics::repetitions_3(&seq), metrics::repetitions_3(&varied));
    }
}

#[test]
fn reversed_input_changes_discriminator_scores() {
    let mut rng = RngState::new(2);
    let d = DiscriminatorParams::init(small(1), &mut rng);
    let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 0.4 + 0.5).collect();
    let x = NormalizedSequence::new(1, data);
    let mut reversed = x.clone();
    reversed.data = x.steps().rev().flatten().copied().collect();
    let (a, b) = (discriminator_forward(&d, &x).unwrap(), discriminator_forward(&d, &reversed).unwrap());
    let mirrored: Vec<f64> = b.per_step.iter().rev().copied().collect();
    assert_ne!(a.per_step, mirrored);
}
