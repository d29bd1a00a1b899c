from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """应用配置类"""

    # 应用基本配置
    app_name: str = "EH-Scheduler"
    app_version: str = "1.0.0"
    debug: bool = False

    # 日志配置
    log_level: str = "INFO"
    log_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # 求解器默认值
    default_grid_intervals: int = 200
    default_epsilon_factor: float = 1e-6  # ε = factor * R
    default_max_iterations: int = 200_000
    tie_tolerance_factor: float = 1e-10
    grid_dedup_tolerance: float = 1e-12
    structure_tolerance_factor: float = 1e-8

    # 仿真默认值
    default_horizon: int = 1_000_000
    default_warmup: int = 10_000
    default_replications: int = 20
    default_episodes: int = 10_000
    discount_truncation: float = 1e-10
    confidence_level: float = 0.95
    sim_chunk_slots: int = 65_536
    max_belief_chain: int = 200_000
    belief_settle_tolerance: float = 1e-15  # |J(p) - p| 不超过该值时视为平稳信念

    # 并发与进度
    max_workers: int = 2
    show_progress: bool = False

    # 验证
    oracle_max_horizon: int = 6

    # 文件输出
    output_dir: str = "outputs"

    class Config:
        env_file = ".env"
        case_sensitive = False


# 创建全局设置实例
settings = Settings()
