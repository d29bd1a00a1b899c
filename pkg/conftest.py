"""测试公共夹具：内置参数组与一次求解的缓存"""
import pytest

from app.models.schemas import ModelParams
from app.services.bellman_service import BeliefGrid, value_iteration
from app.services.policy_service import extract_policy


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 长时间运行的验收测试（-m 'not slow' 跳过）")


def make_params(**overrides) -> ModelParams:
    values = dict(lambda1=0.9, lambda0=0.6, q=0.1, k=5, rate_r=3.0, beta=0.98, b_max=5)
    values.update(overrides)
    return ModelParams(**values)


@pytest.fixture
def reference_params() -> ModelParams:
    return make_params()


@pytest.fixture
def costly_sense_params() -> ModelParams:
    return make_params(k=2)


@pytest.fixture
def throughput_params() -> ModelParams:
    return make_params(lambda1=0.7, lambda0=0.2, q=0.5, k=10, rate_r=2.0, beta=0.999)


@pytest.fixture
def small_params() -> ModelParams:
    """小规模参数，求解在毫秒级"""
    return make_params(k=2, b_max=2, beta=0.9, q=0.3)


@pytest.fixture(scope="session")
def reference_solution():
    """参考参数组下的网格、值函数表和最优策略"""
    params = make_params()
    grid = BeliefGrid.build(params, 200)
    table = value_iteration(params, grid, 1e-6 * params.rate_r)
    policy = extract_policy(params, grid, table)
    return params, grid, table, policy
