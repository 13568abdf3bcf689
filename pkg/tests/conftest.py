import os

import pytest


def pytest_collection_modifyitems(config, items):
    gates = {
        "slow": ("WEAKCV_SLOW", "slow tier; set WEAKCV_SLOW=1"),
        "full": ("WEAKCV_FULL", "five-dimensional tier; set WEAKCV_FULL=1"),
    }
    for name, (env, reason) in gates.items():
        if os.environ.get(env) == "1":
            continue
        skip = pytest.mark.skip(reason=reason)
        for item in items:
            if name in item.keywords:
                item.add_marker(skip)
