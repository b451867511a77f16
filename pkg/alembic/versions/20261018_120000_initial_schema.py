"""initial schema

Revision ID: 20261018_120000
Revises: 
Create Date: 2026-10-18 12:00:00.000000

"""
from alembic import op
import sqlalchemy as sa
from datetime import datetime

# revision identifiers, used by Alembic.
revision = '20261018_120000'
down_revision = None
branch_labels = None
depends_on = None

def upgrade():
    # Создаем таблицу runs
    op.create_table(
        'runs',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.String(), nullable=False),
        sa.Column('config_hash', sa.String(), nullable=False),
        sa.Column('tool_version', sa.String(), nullable=False),
        sa.Column('created_at', sa.DateTime(), nullable=True, default=datetime.utcnow),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_runs_run_id'), 'runs', ['run_id'], unique=True)
    op.create_index(op.f('ix_runs_id'), 'runs', ['id'], unique=False)

    # Этапы запуска
    op.create_table(
        'stages',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('name', sa.String(), nullable=False),
        sa.Column('status', sa.String(), nullable=False),
        sa.Column('config_hash', sa.String(), nullable=False),
        sa.Column('position', sa.Integer(), nullable=False, server_default='0'),
        sa.Column('started_at', sa.DateTime(), nullable=True),
        sa.Column('finished_at', sa.DateTime(), nullable=True),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
        sa.PrimaryKeyConstraint('id'),
        sa.UniqueConstraint('run_id', 'name', name='uq_stage_run_name')
    )

    # Артефакты и родословная чекпоинтов
    op.create_table(
        'artifacts',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('stage', sa.String(), nullable=False),
        sa.Column('kind', sa.String(), nullable=False),
        sa.Column('path', sa.String(), nullable=False),
        sa.Column('checkpoint_id', sa.String(), nullable=True),
        sa.Column('parent_checkpoint_id', sa.String(), nullable=True),
        sa.Column('role', sa.String(), nullable=True),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
        sa.PrimaryKeyConstraint('id')
    )
    op.create_index(op.f('ix_artifacts_checkpoint_id'), 'artifacts', ['checkpoint_id'], unique=False)

    op.create_table(
        'metrics',
        sa.Column('id', sa.Integer(), nullable=False),
        sa.Column('run_id', sa.Integer(), nullable=False),
        sa.Column('stage', sa.String(), nullable=False),
        sa.Column('subject', sa.String(), nullable=False),
        sa.Column('ca', sa.Float(), nullable=False),
        sa.Column('asr', sa.String(), nullable=False),
        sa.Column('effective_asr', sa.Float(), nullable=True),
        sa.Column('poison_ratio', sa.Float(), nullable=True),
        sa.Column('dataset', sa.String(), nullable=True),
        sa.Column('seed', sa.Integer(), nullable=True),
        sa.ForeignKeyConstraint(['run_id'], ['runs.id'], ),
        sa.PrimaryKeyConstraint('id')
    )

def downgrade():
    op.drop_table('metrics')
    op.drop_index(op.f('ix_artifacts_checkpoint_id'), table_name='artifacts')
    op.drop_table('artifacts')
    op.drop_table('stages')
    op.drop_index(op.f('ix_runs_id'), table_name='runs')
    op.drop_index(op.f('ix_runs_run_id'), table_name='runs')
    op.drop_table('runs')
