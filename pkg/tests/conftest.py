import pytest
import torch

from lipvsr.corpus import CorpusConfig, generate_corpus

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def small_corpus():
    """2 speakers x 10 utterances at 48x48."""
    return generate_corpus(CorpusConfig(seed=0, speakers=2, per_speaker=10, height=48, width=48))


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


def tiny_model_config(num_speakers=2):
    """Narrow model on the full 20-landmark layout, for fast training tests."""
    from lipvsr.backend import ConformerConfig
    from lipvsr.decoder import DecoderConfig
    from lipvsr.frontend import FrontendConfig
    from lipvsr.model import ModelConfig

    return ModelConfig(
        frontend=FrontendConfig(patch_size=12, patch_resolution=8, fps_set=(10, 12), tubelet_channels=(4, 8, 16),
                                relpos_hidden=16, fusion_layers=1, fusion_heads=2, fusion_mlp_dim=16,
                                motion_dim=8, output_dim=16, mouth_patch_size=24),
        conformer=ConformerConfig(blocks=1, model_dim=16, ff_dim=32, heads=2, depthwise_kernel=5),
        decoder=DecoderConfig(layers=1, model_dim=16, ff_dim=32, heads=2),
        num_speakers=num_speakers, id_dim=8, mi_hidden=16,
    )


@pytest.fixture
def tiny_cfg():
    return tiny_model_config


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
