#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#

import pytest

collect_ignore = ["setup.py"]
collect_ignore_glob = ["examples/*"]


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Also run the long training runs marked as slow.",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
