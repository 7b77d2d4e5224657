"""
Admin configuration for experiment runs
"""

from django.contrib import admin

from .models import ExperimentRun, RoundSnapshot


class RoundSnapshotInline(admin.TabularInline):
    model = RoundSnapshot
    extra = 0
    fields = ['round_number', 'accuracy', 'loss', 'firm_malicious', 'unreliable', 'no_participants']
    readonly_fields = fields
    can_delete = False


@admin.register(ExperimentRun)
class ExperimentRunAdmin(admin.ModelAdmin):
    list_display = ['name', 'aggregator', 'status', 'final_accuracy', 'created_at', 'finished_at']
    list_filter = ['status', 'aggregator']
    search_fields = ['name']
    readonly_fields = ['id', 'config', 'summary', 'created_at', 'updated_at', 'created_by', 'updated_by',
                       'started_at', 'finished_at']
    inlines = [RoundSnapshotInline]

    fieldsets = (
        (None, {
            'fields': ('name', 'aggregator', 'status', 'output_dir', 'error_message')
        }),
        ('Results', {
            'fields': ('config', 'summary', 'started_at', 'finished_at'),
        }),
        ('Metadata', {
            'fields': ('id', 'created_at', 'updated_at', 'created_by', 'updated_by'),
            'classes': ('collapse',)
        }),
    )

    def save_model(self, request, obj, form, change):
        if not change:
            obj.created_by = request.user
        obj.updated_by = request.user
        super().save_model(request, obj, form, change)


@admin.register(RoundSnapshot)
class RoundSnapshotAdmin(admin.ModelAdmin):
    list_display = ['run', 'round_number', 'accuracy', 'loss', 'firm_malicious', 'unreliable']
    list_filter = ['no_participants']
    readonly_fields = ['id', 'created_at', 'updated_at']
