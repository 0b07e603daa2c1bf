import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical test")
    config.addinivalue_line("markers", "acceptance: acceptance-criteria test")
