import numpy as np
import pytest

from mhri.data import (
    Category,
    Decision,
    GazeInfo,
    Participant,
    SceneLabel,
    dataset_stats,
    save_dataset,
    validate_episode,
)
from mhri.errors import ConfigError
from mhri.synth import (
    SPEAKER_BLOCK,
    Act,
    SynthConfig,
    decide_response,
    emit_features,
    generate_dataset,
    generate_episode,
    oracle_decode,
)


def test_default_corpus_size(default_episodes):
    n = sum(len(ep) for ep in default_episodes)
    assert len(default_episodes) == 60
    assert 900 <= n <= 1400


def test_every_episode_validates(default_episodes):
    for ep in default_episodes:
        validate_episode(ep)


def test_robot_utterances_never_respond(default_episodes):
    for ep in default_episodes:
        for u in ep.utterances:
            if u.speaker == Participant.R:
                assert u.response is Decision.NONE


def test_robot_replies_follow_responded_turns(default_episodes):
    for ep in default_episodes:
        for prev, cur in zip(ep.utterances, ep.utterances[1:]):
            assert (cur.speaker == Participant.R) == (prev.response is not Decision.NONE)


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(n_episodes=5)
    save_dataset(generate_dataset(cfg), tmp_path / "a.jsonl")
    save_dataset(generate_dataset(cfg), tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_episode_independent_of_generation_order():
    cfg = SynthConfig(n_episodes=4)
    assert generate_episode(cfg, 3) == generate_dataset(cfg)[3]


def test_timestamps_increase_and_roughly_three_minutes(default_episodes):
    for ep in default_episodes:
        for a, b in zip(ep.utterances, ep.utterances[1:]):
            assert a.end_s <= b.start_s
    mean = np.mean([ep.utterances[-1].end_s for ep in default_episodes])
    assert 120 < mean < 240


def test_no_multi_listener_means_no_respond_both():
    eps = generate_dataset(SynthConfig(n_episodes=20, p_multi_listener=0.0, p_lws=0.15))
    for ep in eps:
        for u in ep.utterances:
            assert u.response is not Decision.RESPOND_BOTH
            if u.speaker != Participant.R:
                assert not u.scene.multi_listener


def test_fractions_within_three_points():
    eps = generate_dataset(SynthConfig(n_episodes=120, seed=7))
    s = dataset_stats(eps)
    assert s.utterances_per_speaker_type["human"] >= 1000
    cfg = SynthConfig()
    assert abs(s.category_fractions["C"] - cfg.p_consistency) <= 0.03
    assert abs(s.category_fractions["LWS"] - cfg.p_lws) <= 0.03
    assert abs(s.category_fractions["SWL"] - cfg.p_swl) <= 0.03
    assert abs(s.multi_listener_fraction - cfg.p_multi_listener) <= 0.03
    assert abs(s.casual_fraction - cfg.p_casual) <= 0.03


@pytest.mark.parametrize("p_lws, p_swl", [(0.0, 0.0), (0.3, 0.2)])
def test_category_mix_follows_config(p_lws, p_swl):
    cfg = SynthConfig(n_episodes=80, p_consistency=1 - p_lws - p_swl, p_lws=p_lws, p_swl=p_swl, seed=11)
    s = dataset_stats(generate_dataset(cfg))
    assert abs(s.category_fractions["LWS"] - p_lws) <= 0.03
    assert abs(s.category_fractions["SWL"] - p_swl) <= 0.03


def test_response_rule():
    to_robot = SceneLabel(0, (0, 0, 1))
    assert decide_response(to_robot, Act.QUESTION) is Decision.RESPOND_H1
    assert decide_response(SceneLabel(1, (0, 0, 1)), Act.CHAT) is Decision.RESPOND_H2
    assert decide_response(to_robot, Act.EXCLAMATION) is Decision.NONE
    assert decide_response(SceneLabel(0, (0, 1, 0)), Act.QUESTION) is Decision.NONE
    assert decide_response(SceneLabel(0, (0, 1, 1)), Act.CHAT) is Decision.RESPOND_BOTH
    assert decide_response(SceneLabel(0, (0, 1, 1)), Act.QUESTION) is Decision.RESPOND_H1
    assert decide_response(SceneLabel(2, (1, 0, 0)), Act.REPLY) is Decision.NONE


def test_noiseless_features_decode_exactly():
    cfg = SynthConfig(noise_sigma=0.0, p_text_cue=1.0)
    scene = SceneLabel(1, (1, 0, 1))
    gaze = GazeInfo(2, Category.CONSISTENCY)
    video, text = emit_features(scene, gaze, Act.CHAT, np.random.default_rng(0), cfg)
    assert np.argmax(video[SPEAKER_BLOCK]) == 1
    assert video[3:6].tolist() == [0.0, 0.0, 1.0]
    assert text[:4].tolist() == [0.0, 0.0, 0.0, 1.0]
    assert text[4:7].tolist() == [1.0, 0.0, 1.0]
    assert not video[6:].any() and not text[7:].any()


def test_no_cue_lws_hides_addressee():
    cfg = SynthConfig(noise_sigma=0.0, p_text_cue=0.0)
    a = emit_features(SceneLabel(0, (0, 1, 0)), GazeInfo(2, Category.LOOK_WITHOUT_SPEAK), Act.REPLY,
                      np.random.default_rng(0), cfg)
    b = emit_features(SceneLabel(0, (0, 0, 1)), GazeInfo(2, Category.CONSISTENCY), Act.REPLY,
                      np.random.default_rng(0), cfg)
    # different addressees, identical features
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_oracle_is_perfect_on_noiseless_cued_data():
    eps = generate_dataset(SynthConfig(n_episodes=20, noise_sigma=0.0, p_text_cue=1.0))
    for ep in eps:
        for u, (spk, lis, resp) in zip(ep.utterances, oracle_decode(ep)):
            assert spk == u.speaker and lis == u.scene.listeners and resp is u.response


def test_block_decoder_recovers_speaker_at_defaults():
    rng = np.random.default_rng(99)
    cfg = SynthConfig()
    hits = 0
    for i in range(1000):
        speaker = int(rng.integers(3))
        listeners = tuple(int(p != speaker and p == (speaker + 1) % 3) for p in range(3))
        video, _ = emit_features(SceneLabel(speaker, listeners), GazeInfo(None, Category.SPEAK_WITHOUT_LOOK),
                                 Act.REPLY, rng, cfg)
        hits += int(np.argmax(video[SPEAKER_BLOCK]) == speaker)
    assert hits / 1000 > 0.95


@pytest.mark.parametrize("bad", [
    dict(p_consistency=0.5),
    dict(p_casual=1.5),
    dict(d_v=7),
    dict(utterances_per_episode=(5, 2)),
    dict(p_multi_listener=0.9, p_lws=0.15),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        SynthConfig(**bad)


def test_config_unknown_key_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        SynthConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = SynthConfig(n_episodes=3, seed=5)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg
