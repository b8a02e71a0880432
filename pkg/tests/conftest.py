import torch

import acceptance_log

# bit-level reproducibility checks assume a single intra-op thread
torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance_log.LINES):
        terminalreporter.write_line(acceptance_log.LINES[k])
